"""Run the whole pipeline on the small ``quick`` preset and print the report.

The data carry a land-use threshold effect at transfer stations, so the
CNN 2 models, which see land use, pull ahead of MNL and CNN 1.  The
transformers get three epochs here and barely leave their starting point;
the ``desk`` preset (``routechoice pipeline --preset desk``) is the
full-size study.

    python3 demos/ordering_quick.py [output_dir]
"""
import sys

from routechoice.cli.config import preset
from routechoice.cli.pipeline import RunDir, run_pipeline

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo-quick"
cfg = preset("quick")
run_pipeline(cfg, output_dir=out)
print(RunDir(out).file("report.txt").read_text())
