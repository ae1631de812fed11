"""Desk-scale federated training on a linear least-squares task.

Clients with id <= f are Byzantine and replace the gradient they send with
the output of an ``AttackModel``. Each round goes through the full protocol
simulation; the aggregate is applied with a fixed learning rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .core import GradientVector, SystemConfig, ValidationError
from .protocol import ProtocolSimulation, RoundOutcome

ATTACK_KINDS = ("none", "sign_flip", "gaussian", "constant", "scaled")


@dataclass(frozen=True)
class AttackModel:
    """``scale`` is lambda for sign_flip/scaled, the fill value for constant,
    and the standard deviation for gaussian (with mean ``mean``)."""

    kind: str = "none"
    scale: float = 1.0
    mean: float = 0.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValidationError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if not (math.isfinite(self.scale) and math.isfinite(self.mean)):
            raise ValidationError("attack parameters must be finite")
        if self.kind == "gaussian" and self.scale < 0:
            raise ValidationError("gaussian attack needs a non-negative standard deviation")

    @classmethod
    def from_dict(cls, raw: dict) -> "AttackModel":
        extra = set(raw) - {"kind", "scale", "mean"}
        if extra:
            raise ValidationError(f"unknown attack keys: {sorted(extra)}")
        return cls(**raw)


def apply_attack(g: GradientVector, attack: AttackModel,
                 rng: Optional[np.random.Generator] = None) -> GradientVector:
    kind, lam = attack.kind, attack.scale
    if kind == "none":
        return g
    if kind == "sign_flip":
        out = -lam * g.values
    elif kind == "scaled":
        out = lam * g.values
    elif kind == "constant":
        out = np.full(g.dim, lam)
    else:
        if rng is None:
            raise ValidationError("gaussian attack needs a random generator")
        out = rng.normal(attack.mean, lam, size=g.dim)
    return GradientVector(g.client_id, out)


@dataclass
class ToyTask:
    w_star: np.ndarray
    xs: Dict[int, np.ndarray]
    ys: Dict[int, np.ndarray]
    learning_rate: float = 0.05

    @classmethod
    def generate(cls, n_clients: int, dim: int, samples_per_client: int = 64,
                 data_noise: float = 0.1, seed: int = 0, learning_rate: float = 0.05) -> "ToyTask":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A5C]))
        w_star = rng.standard_normal(dim)
        xs, ys = {}, {}
        for i in range(1, n_clients + 1):
            x = rng.standard_normal((samples_per_client, dim))
            xs[i] = x
            ys[i] = x @ w_star + data_noise * rng.standard_normal(samples_per_client)
        return cls(w_star, xs, ys, learning_rate)

    @property
    def dim(self) -> int:
        return self.w_star.shape[0]

    def client_loss(self, client_id: int, w: np.ndarray) -> float:
        r = self.xs[client_id] @ w - self.ys[client_id]
        return float(r @ r) / r.shape[0]

    def loss(self, w: np.ndarray, ids=None) -> float:
        ids = sorted(self.xs) if ids is None else ids
        return math.fsum(self.client_loss(i, w) for i in ids) / len(ids)


def honest_gradient(task: ToyTask, client_id: int, w: np.ndarray) -> GradientVector:
    """(2/m) X^T (X w - y) for one client's data."""
    x = task.xs.get(client_id)
    if x is None or x.shape[0] == 0:
        raise ValidationError(f"client {client_id} has no data")
    resid = x @ w - task.ys[client_id]
    return GradientVector(client_id, (2.0 / x.shape[0]) * (x.T @ resid))


@dataclass
class ExperimentResult:
    aggregator: str
    losses: List[float]
    byz_selected: List[int]
    outcomes: List[RoundOutcome] = field(repr=False)
    final_w: np.ndarray = field(repr=False, default=None)

    def csv_rows(self):
        for r, (loss, nb) in enumerate(zip(self.losses, self.byz_selected)):
            yield {"round": r, "aggregator": self.aggregator, "loss": repr(loss), "byz_selected_count": nb}


def run_experiment(task: ToyTask, config: SystemConfig, attack: AttackModel, aggregator: str = "multikrum",
                   rounds: int = 200, learning_rate: Optional[float] = None,
                   dropouts: Optional[Dict[int, List[int]]] = None) -> ExperimentResult:
    """Train from w = 0; loss is the mean over honest clients after each update.

    Byzantine clients are ids 1..f. A round that fails its precondition
    leaves the model unchanged.
    """
    if aggregator not in ("multikrum", "plain_mean"):
        raise ValidationError(f"unknown aggregator {aggregator!r}")
    lr = task.learning_rate if learning_rate is None else learning_rate
    f = config.n_byzantine
    honest_ids = [i for i in range(1, config.n_clients + 1) if i > f]
    attack_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA77A]))
    state = {"w": np.zeros(task.dim)}

    def source(client_id: int, round_index: int) -> np.ndarray:
        g = honest_gradient(task, client_id, state["w"])
        if client_id <= f:
            g = apply_attack(g, attack, attack_rng)
        return g.values

    sim = ProtocolSimulation(config, source, aggregator=aggregator)
    losses, byz = [], []
    for r in range(rounds):
        drops = (dropouts or {}).get(r, [])
        out = sim.run_round(r, drop_before_upload=drops)
        if out.status == "ok":
            state["w"] = state["w"] - lr * out.aggregate.values
        chosen = out.selection.selected_ids if out.selection is not None else out.participating_ids
        byz.append(sum(1 for i in chosen if i <= f) if out.status == "ok" else 0)
        losses.append(task.loss(state["w"], honest_ids))
    return ExperimentResult(aggregator, losses, byz, sim.outcomes, state["w"])


def write_loss_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["round", "aggregator", "loss", "byz_selected_count"])
        writer.writeheader()
        for res in results:
            writer.writerows(res.csv_rows())
