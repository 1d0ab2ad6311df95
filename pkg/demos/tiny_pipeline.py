"""The full command-line workflow at toy scale, in under a minute.

gen-data -> train -> reconstruct -> evaluate -> compare, driven through the
same entry point as the `fmtrecon` command. The model is far too small and
briefly trained to reconstruct well; the point is the plumbing and the
files each stage leaves behind.

    python demos/tiny_pipeline.py [work_dir]
"""
import sys
from pathlib import Path

from fmtrecon.cli import main
from fmtrecon.config import ExperimentConfig, GridSection, LayoutSection, NetSection, ScheduleSection

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/pipeline")
work.mkdir(parents=True, exist_ok=True)

cfg = ExperimentConfig(count=16)
cfg.grid = GridSection(16, 4)
cfg.layout = LayoutSection(4, 1, 8, 4)
cfg.schedule = ScheduleSection("custom", 50, 1e-3, 0.2)
cfg.net = NetSection(base_width=8, levels=2, blocks_per_level=1, time_embed_dim=16, norm_groups=4)
cfg.train.batch_size = 8
cfg.art.iters, cfg.art.relax = 200, 0.5
cfg.compare.held_out = 3
cfg.save(work / "config.json")


def step(*args):
    print("$ fmtrecon", " ".join(map(str, args)))
    code = main([str(a) for a in args])
    if code:
        sys.exit(code)


step("gen-data", "--config", work / "config.json", "--out", work / "data")
step("train", "--dataset", work / "data", "--steps", 200, "--out", work / "train")
step("reconstruct", "--method", "mdiff", "--dataset", work / "data", "--record", 0,
     "--checkpoint", work / "train" / "model.ckpt", "--out", work / "recon")
step("reconstruct", "--method", "art", "--dataset", work / "data", "--record", 0, "--out", work / "recon")
step("evaluate", work / "recon" / "mdiff.json", work / "recon" / "art.json", "--out", work / "metrics.csv")
print((work / "metrics.csv").read_text())
step("compare", "--dataset", work / "data", "--methods", "art,stomp,mdiff",
     "--checkpoint", work / "train" / "model.ckpt", "--out", work / "compare")
print((work / "compare" / "summary.csv").read_text())
