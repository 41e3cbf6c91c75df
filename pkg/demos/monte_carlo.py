"""Monte-Carlo run of the bundled Khepera scenario, the same thing
``nuise simulate`` does from the command line."""
import sys
import tempfile
from importlib import resources

from nuise.sim.cli import print_summary
from nuise.sim.config import load_config
from nuise.sim.metrics import run_monte_carlo

config = load_config(resources.files("nuise") / "data" / "khepera_circle.yaml")
out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="nuise-")
report = run_monte_carlo(config, out)
print_summary(report.to_dict())
print(f"\nlogs and report.json written to {out}")
