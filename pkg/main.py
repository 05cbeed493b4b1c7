"""
Entry point for the PSG masked-autoencoder toolkit.

    python main.py gen-data --subjects 20 --epochs 200 --mode osa2 --seed 7 --out data/
    python main.py pretrain --data data/ --steps 2000 --seed 1 --out runs/p1
    python main.py finetune --task osa --pretrained runs/p1 --data data/ --out runs/f1
"""
import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
