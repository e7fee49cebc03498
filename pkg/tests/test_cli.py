import numpy as np
import pytest
from click.testing import CliRunner

from rcnet.checkpoint import load_checkpoint, save_checkpoint
from rcnet.data import load_image, save_image
from rcnet.main import cli
from rcnet.model import build
from rcnet.schemas import CorruptionSpec, DataSpec, RunConfig, Task

from tests.conftest import smooth_image, tiny_net_config, write_config


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


@pytest.fixture
def identity_checkpoint(tmp_path):
    """
    Денойзер с нулевой транспонированной свёрткой: выход равен входу.
    """
    config = RunConfig(task=Task.DENOISE, seed=1, net=tiny_net_config(),
                       corruption=CorruptionSpec(sigma=25), data=DataSpec(train_manifest="train.txt"))
    net = build(config.net, 0)
    for name, value in net.named_buffers().items():
        if name.startswith(f"layer{len(net.layers) - 1:02d}."):
            value[...] = 0
    return save_checkpoint(tmp_path / "identity.rcn", net, config, 0)


def assert_single_error(result, prefix, code=1):
    assert result.exit_code == code
    lines = result.stderr.strip().splitlines()
    assert lines[-1].startswith(f"error: {prefix}:")


def test_inspect_default_network(runner):
    result = runner.invoke(cli, ["inspect"])
    assert result.exit_code == 0, result.stderr
    assert "total parameters: 1814081 (~1.81M)" in result.output
    assert "| 21 | deconv |" in result.output


def test_inspect_variants(runner):
    result = runner.invoke(cli, ["inspect", "--variant", "win"])
    assert result.exit_code == 0
    assert "total parameters: 2416897" in result.output
    assert_single_error(runner.invoke(cli, ["inspect", "--variant", "resnet"]), "ArchitectureError")


def test_train_writes_outputs_and_is_reproducible(runner, tmp_path, image_dir):
    out = tmp_path / "run"
    config = write_config(tmp_path / "run.cfg", image_dir, out, extra="val_every = 3\ncheckpoint_every = 2\n")
    result = runner.invoke(cli, ["train", "--config", str(config)])
    assert result.exit_code == 0, result.stderr
    assert f"checkpoint: {out / 'final.rcn'}" in result.output

    rows = (out / "train_log.csv").read_text().splitlines()
    assert rows[0] == "iter,lr,train_loss,val_loss,val_psnr"
    assert [row.split(",")[0] for row in rows[1:]] == ["1", "2", "3"]
    assert rows[1].endswith(",NA,NA") and not rows[3].endswith(",NA,NA")
    assert (out / "checkpoint_0000002.rcn").exists()
    assert "iter=3" in result.stderr

    first = (out / "final.rcn").read_bytes()
    assert runner.invoke(cli, ["train", "--config", str(config)]).exit_code == 0
    assert (out / "final.rcn").read_bytes() == first


def test_resume_matches_uninterrupted_run(runner, tmp_path, image_dir):
    config = write_config(tmp_path / "run.cfg", image_dir, tmp_path / "unused")
    full, part = tmp_path / "full", tmp_path / "part"
    assert runner.invoke(cli, ["train", "--config", str(config), "--out", str(full), "--iters", "3"]).exit_code == 0
    assert runner.invoke(cli, ["train", "--config", str(config), "--out", str(part), "--iters", "2"]).exit_code == 0
    result = runner.invoke(cli, ["train", "--config", str(config), "--out", str(part), "--iters", "3",
                                 "--resume", str(part / "final.rcn")])
    assert result.exit_code == 0, result.stderr

    a, b = load_checkpoint(full / "final.rcn"), load_checkpoint(part / "final.rcn")
    assert a.iteration == b.iteration == 3
    assert all(np.array_equal(a.buffers[k], b.buffers[k]) for k in a.buffers)
    assert all(np.array_equal(a.velocity[k], b.velocity[k]) for k in a.velocity)
    assert (full / "train_log.csv").read_text() == (part / "train_log.csv").read_text()


def test_config_error_is_one_line(runner, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("task = denoise\ncorruption.sigma = 25\ndata.train_manifest = x.txt\noptim.lr0 = fast\n")
    assert_single_error(runner.invoke(cli, ["train", "--config", str(bad)]), "ConfigError")
    assert_single_error(runner.invoke(cli, ["train", "--config", str(tmp_path / "absent.cfg")]), "ConfigError")


def test_divergence_exit_code(runner, tmp_path, image_dir):
    config = write_config(tmp_path / "run.cfg", image_dir, tmp_path / "run", extra="optim.lr0 = 1e30\n")
    result = runner.invoke(cli, ["train", "--config", str(config), "--iters", "10"])
    assert_single_error(result, "TrainingDivergedError", code=3)


def test_denoise_with_identity_network(runner, tmp_path, rng, identity_checkpoint):
    img = smooth_image(rng, 20, 24)
    path = tmp_path / "photo.pgm"
    save_image(img, path)
    out = tmp_path / "denoised"
    result = runner.invoke(cli, ["denoise", "--checkpoint", str(identity_checkpoint), "--input", str(path),
                                 "--reference", str(path), "--out", str(out)])
    assert result.exit_code == 0, result.stderr
    np.testing.assert_array_equal(load_image(out / "photo_restored.pgm").pixels, img.pixels)
    report = (out / "report.csv").read_text().splitlines()
    assert report[0] == "image,psnr_db,ssim,runtime_s,input_psnr_db,input_ssim"
    assert report[1].startswith("photo,inf,1.0,")


def test_denoise_rejects_sr_checkpoint(runner, tmp_path, rng):
    config = RunConfig(task=Task.SR, seed=1, net=tiny_net_config(),
                       corruption=CorruptionSpec(kind="sr", scale=2), data=DataSpec(train_manifest="t.txt"))
    checkpoint = save_checkpoint(tmp_path / "sr.rcn", build(config.net, 0), config, 0)
    path = tmp_path / "photo.pgm"
    save_image(smooth_image(rng, 12, 12), path)
    result = runner.invoke(cli, ["denoise", "--checkpoint", str(checkpoint), "--input", str(path),
                                 "--out", str(tmp_path / "out")])
    assert_single_error(result, "CheckpointError")


def test_evaluate(runner, tmp_path, image_dir, identity_checkpoint):
    out = tmp_path / "eval"
    result = runner.invoke(cli, ["evaluate", "--checkpoint", str(identity_checkpoint),
                                 "--manifest", str(image_dir / "val.txt"), "--sigma", "25", "--out", str(out)])
    assert result.exit_code == 0, result.stderr
    rows = (out / "report.csv").read_text().splitlines()
    assert len(rows) == 3
    # Тождественная сеть возвращает шумный вход: качество равно базовой линии
    for row in rows[1:]:
        _, psnr_db, ssim_value, _, input_psnr, input_ssim = row.split(",")
        assert float(psnr_db) == pytest.approx(float(input_psnr), abs=0.05)
    assert "| noisy input |" in (out / "report.md").read_text()

    both = runner.invoke(cli, ["evaluate", "--checkpoint", str(identity_checkpoint), "--manifest",
                               str(image_dir / "val.txt"), "--sigma", "25", "--factor", "2", "--out", str(out)])
    assert_single_error(both, "ConfigError")


def test_superres_from_clean(runner, tmp_path, rng):
    config = RunConfig(task=Task.SR, seed=1, net=tiny_net_config(),
                       corruption=CorruptionSpec(kind="sr", scale=2), data=DataSpec(train_manifest="t.txt"))
    checkpoint = save_checkpoint(tmp_path / "sr.rcn", build(config.net, 0), config, 0)
    path = tmp_path / "hr.png"
    save_image(smooth_image(rng, 21, 20), path)
    out = tmp_path / "sr"
    result = runner.invoke(cli, ["superres", "--checkpoint", str(checkpoint), "--input", str(path),
                                 "--factor", "2", "--from-clean", "--out", str(out)])
    assert result.exit_code == 0, result.stderr
    assert load_image(out / "hr_restored.png").pixels.shape == (20, 20)
    assert_single_error(runner.invoke(cli, ["superres", "--checkpoint", str(checkpoint), "--input", str(path),
                                            "--factor", "5", "--out", str(out)]), "ConfigError")


def test_stability(runner, tmp_path, image_dir):
    config = write_config(tmp_path / "run.cfg", image_dir, tmp_path / "stab")
    out = tmp_path / "stab"
    result = runner.invoke(cli, ["stability", "--config", str(config), "--variant", "rcnet", "--variant", "win",
                                 "--iters", "4", "--window", "2"])
    assert result.exit_code == 0, result.stderr
    rolling = (out / "rolling_std.csv").read_text().splitlines()
    assert rolling[0] == "iter,rcnet,win"
    assert len(rolling) == 1 + (4 - 2 + 1)
    grids = [[row.split(",")[0] for row in (out / f"{v}.csv").read_text().splitlines()] for v in ("rcnet", "win")]
    assert grids[0] == grids[1]
    assert (out / "stability_summary.csv").exists()

    first = (out / "rolling_std.csv").read_text()
    assert runner.invoke(cli, ["stability", "--config", str(config), "--variant", "rcnet", "--variant", "win",
                               "--iters", "4", "--window", "2"]).exit_code == 0
    assert (out / "rolling_std.csv").read_text() == first


@pytest.mark.parametrize("args, message", [
    (["train"], "error: UsageError: Missing option '--config'."),
    (["denoise", "--checkpoint", "x.rcn"], "error: UsageError: Missing option '--input'."),
    (["inspect", "--bogus"], "error: UsageError: No such option: --bogus"),
])
def test_usage_error_is_one_line(runner, args, message):
    result = runner.invoke(cli, args)
    assert result.exit_code == 2
    assert result.stderr.strip().splitlines() == [message]


def test_unknown_command_is_one_line(runner):
    result = runner.invoke(cli, ["frobnicate"])
    assert result.exit_code == 2
    lines = result.stderr.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: UsageError: No such command")


def test_help_and_version_exit_cleanly(runner):
    assert runner.invoke(cli, ["--help"]).exit_code == 0
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert "rcnet" in result.output


@pytest.mark.parametrize("task, factor", [("sr", 2), ("sr_blind", 3)])
def test_train_and_superres(runner, tmp_path, rng, image_dir, task, factor):
    out = tmp_path / "run"
    config = write_config(tmp_path / "run.cfg", image_dir, out, task=task, extra="val_every = 3\n")
    result = runner.invoke(cli, ["train", "--config", str(config)])
    assert result.exit_code == 0, result.stderr
    rows = (out / "train_log.csv").read_text().splitlines()
    assert len(rows) == 4 and not rows[3].endswith(",NA,NA")
    assert load_checkpoint(out / "final.rcn").config.task.value == task

    path = tmp_path / "hr.pgm"
    save_image(smooth_image(rng, 24, 22), path)
    sr_out = tmp_path / "sr"
    result = runner.invoke(cli, ["superres", "--checkpoint", str(out / "final.rcn"), "--input", str(path),
                                 "--factor", str(factor), "--from-clean", "--out", str(sr_out)])
    assert result.exit_code == 0, result.stderr
    restored = load_image(sr_out / "hr_restored.pgm").pixels
    assert restored.shape == (24 - 24 % factor, 22 - 22 % factor)
    report = (sr_out / "report.csv").read_text().splitlines()
    assert len(report) == 2 and report[1].startswith("hr,")
    assert "| bicubic |" in (sr_out / "report.md").read_text()

    # LR-вход без эталона увеличивается в factor раз
    lr_path = tmp_path / "lr.png"
    save_image(smooth_image(rng, 8, 7), lr_path)
    result = runner.invoke(cli, ["superres", "--checkpoint", str(out / "final.rcn"), "--input", str(lr_path),
                                 "--factor", str(factor), "--out", str(sr_out)])
    assert result.exit_code == 0, result.stderr
    assert load_image(sr_out / "lr_restored.png").pixels.shape == (8 * factor, 7 * factor)


@pytest.mark.parametrize("task, labels", [("sr", ["x2"]), ("sr_blind", ["x2", "x3", "x4"])])
def test_ablation(runner, tmp_path, image_dir, task, labels):
    out = tmp_path / "ablation"
    config = write_config(tmp_path / "run.cfg", image_dir, out, task=task)
    result = runner.invoke(cli, ["ablation", "--config", str(config), "--iters", "2"])
    assert result.exit_code == 0, result.stderr

    table = (out / "ablation.md").read_text().splitlines()
    assert table[0] == "| scale | bicubic | RC-Net with BN | RC-Net without BN |"
    assert table[1] == "|---|---|---|---|"
    assert [line.split("|")[1].strip() for line in table[2:]] == labels
    assert all(line.count("|") == 5 for line in table)
    assert result.output.splitlines() == table

    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "scale,variant,psnr_db,ssim"
    assert [row.split(",")[1] for row in rows[1:4]] == ["bicubic", "with_bn", "without_bn"]
    assert len(rows) == 1 + 3 * len(labels)
    assert (out / "bn" / "final.rcn").exists() and (out / "nobn" / "final.rcn").exists()
    assert not load_checkpoint(out / "nobn" / "final.rcn").config.net.use_bn


def test_ablation_requires_validation_manifest(runner, tmp_path, image_dir):
    config = write_config(tmp_path / "run.cfg", image_dir, tmp_path / "ablation", task="sr")
    text = "".join(line for line in config.read_text().splitlines(keepends=True)
                   if not line.startswith("data.val_manifest"))
    config.write_text(text)
    result = runner.invoke(cli, ["ablation", "--config", str(config), "--iters", "1"])
    assert_single_error(result, "ConfigError")
