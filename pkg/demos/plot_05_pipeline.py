"""
The whole experiment
====================

``run_pipeline`` trains five unimodal models, sews the A/B pair into four
early-fusion models, builds the late and hybrid ensembles and reports the
error of each.  This run is shrunk (120 views, 40 epochs) so it finishes in
well under a minute; the defaults are 600 views and 200 epochs.
"""

import tempfile

from posefuse.config import parse_config
from posefuse.evaluation import render_improvements, render_report
from posefuse.pipeline import run_pipeline

out = tempfile.mkdtemp(prefix="posefuse-demo-")
cfg = parse_config(f"""
[experiment]
seed = 0
output_dir = {out}
timing = no

[dataset]
n = 120

[train]
epochs = 40
""")

result = run_pipeline(cfg)
print(render_report(result.reports, "markdown"))
print(render_improvements(result.improvements, "markdown"))
print("stage timings (s):", result.manifest["timings_s"])
print("outputs in", result.output_dir)
