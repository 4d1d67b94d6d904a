"""
Runtime state records passed between the engine, the losses and the trainer
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from src.tensor import Tensor


@dataclass
class ForwardTrace:
    """
    Opt-in record of one forward pass.

    relay_half / relay_full hold f_relay^{b+1/2} and f_relay^{b+1} per block;
    attn_global / attn_local hold the attention probabilities of the global
    step (i) and local step (ii), each [batch, heads, tokens, tokens].
    """

    relay_half: List[np.ndarray] = field(default_factory=list)
    relay_full: List[np.ndarray] = field(default_factory=list)
    attn_global: List[np.ndarray] = field(default_factory=list)
    attn_local: List[np.ndarray] = field(default_factory=list)
    # parallel-relay branch outputs before averaging
    relay_branch_global: List[np.ndarray] = field(default_factory=list)
    relay_branch_local: List[np.ndarray] = field(default_factory=list)


@dataclass
class DualOutput:
    z_loc: Optional[Tensor]
    z_glob: Optional[Tensor] = None
    relay_trace: Optional[ForwardTrace] = None


@dataclass
class LossBreakdown:
    total: Tensor
    local: float = 0.0
    global_: float = 0.0
    consistency: float = 0.0

    def as_row(self) -> Dict[str, float]:
        return {"L_loc": self.local, "L_glo": self.global_, "L_con": self.consistency}


@dataclass
class TrainState:
    """Everything needed to resume an optimisation run bit-for-bit"""

    step: int = 0
    lr: float = 0.0
    best_miou: float = float("-inf")
    evals_since_improvement: int = 0
    reductions: int = 0
    evaluations: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def scalars(self) -> Dict[str, str]:
        return {
            "state.step": str(self.step),
            "state.lr": repr(float(self.lr)),
            "state.best_miou": repr(float(self.best_miou)),
            "state.evals_since_improvement": str(self.evals_since_improvement),
            "state.reductions": str(self.reductions),
            "state.evaluations": str(self.evaluations),
        }

    @classmethod
    def from_scalars(cls, meta: Dict[str, str]) -> "TrainState":
        return cls(
            step=int(meta["state.step"]),
            lr=float(meta["state.lr"]),
            best_miou=float(meta["state.best_miou"]),
            evals_since_improvement=int(meta["state.evals_since_improvement"]),
            reductions=int(meta["state.reductions"]),
            evaluations=int(meta["state.evaluations"]),
        )
