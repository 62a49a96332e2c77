"""Component ablation: which reconstruction losses are switched on."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .data import Dataset
from .model import ViTModel
from .reconstruct import LossLog, ReconstructionConfig, arm_config, run_mgrq
from .train import evaluate_top1

logger = logging.getLogger(__name__)

# (name, obwr, ebgs, ibls)
ARMS = (
    ("baseline", False, False, False),
    ("obwr", True, False, False),
    ("ebgs", False, True, False),
    ("ibls", False, False, True),
    ("obwr+ebgs", True, True, False),
    ("obwr+ebgs+ibls", True, True, True),
)
FP_ROW = "full-precision"
REPORT_FIELDS = ("arm", "obwr", "ebgs", "ibls", "bits_w", "bits_a", "top1")


@dataclass(frozen=True)
class AblationRow:
    arm: str
    obwr: bool
    ebgs: bool
    ibls: bool
    bits_w: int
    bits_a: int
    top1: float


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)
    logs: dict = field(default_factory=dict)  # arm -> LossLog

    def top1(self, arm: str) -> float:
        for r in self.rows:
            if r.arm == arm:
                return r.top1
        raise KeyError(arm)

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(REPORT_FIELDS)
            for r in self.rows:
                w.writerow([r.arm, int(r.obwr), int(r.ebgs), int(r.ibls), r.bits_w, r.bits_a, f"{r.top1:.6f}"])

    def summary(self) -> str:
        def mark(b):
            return "x" if b else "-"

        lines = [f"{'arm':16s} OBWR EBGS IBLS  W/A    top-1"]
        for r in self.rows:
            lines.append(
                f"{r.arm:16s}  {mark(r.obwr)}    {mark(r.ebgs)}    {mark(r.ibls)}   "
                f"{r.bits_w}/{r.bits_a}  {100 * r.top1:6.2f}%"
            )
        return "\n".join(lines)


def run_ablation(fp: ViTModel, calib: Dataset, test: Dataset, config: ReconstructionConfig = ReconstructionConfig(),
                 bits: tuple[int, int] = (4, 4), arms: Optional[tuple] = None) -> AblationReport:
    """Evaluate every arm on ``test``; arm ``i`` is reseeded with ``config.seed + i``."""
    report = AblationReport()
    report.rows.append(AblationRow(FP_ROW, False, False, False, 32, 32, evaluate_top1(fp, test)))
    for i, (name, o, e, b) in enumerate(arms or ARMS):
        log = LossLog()
        q = run_mgrq(fp, calib, arm_config(config, o, e, b, config.seed + i), bits, log)
        acc = evaluate_top1(q, test)
        logger.info("arm %s: top-1 %.4f", name, acc)
        report.rows.append(AblationRow(name, o, e, b, bits[0], bits[1], acc))
        report.logs[name] = log
    return report
