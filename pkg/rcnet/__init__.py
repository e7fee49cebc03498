"""
rcnet - свёрточная сеть RC-Net для подавления шума и суперразрешения
одноканальных изображений на numpy.
"""
__version__ = "0.1.0"
