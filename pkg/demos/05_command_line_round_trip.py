"""Train, checkpoint, resume and evaluate through the command-line entry point.

Run: python3 demos/05_command_line_round_trip.py
"""
import tempfile
from pathlib import Path

from dista.cli import main

work = Path(tempfile.mkdtemp())
cfg = work / "tiny.cfg"
cfg.write_text(f"""
syn_train = 256
syn_test = 128
epochs = 3
dim = 16
timesteps = 4
taw_size = 4
batch_size = 32
out_dir = {work / 'run'}
""")

# Two epochs now, the third from the checkpoint.
main(["train", "--config", str(cfg), "--run-epochs", "2"])
main(["train", "--config", str(cfg), "--resume", str(work / "run" / "checkpoint.dsta")])
print((work / "run" / "metrics.csv").read_text())
main(["eval", "--config", str(cfg), "--checkpoint", str(work / "run" / "checkpoint.dsta")])

# A sweep over the denoising threshold writes ablation.csv.
main(["ablate", "--config", str(cfg), "--axis", "denoise_threshold", "--values", "0,3"])
print((work / "run" / "ablation.csv").read_text())
