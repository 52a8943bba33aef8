"""Desk-scale VGD ablation: 3 seeds, VGD on and off, held-out PSNR and top-quartile D-bar."""

import sys

from vgsplat.experiments import main

if __name__ == "__main__":
    sys.exit(main("vgd"))
