"""Standard desk-scale benchmark shared by the scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .fscil import FscilDataset, SessionReport, make_synthetic
from .model import ConvLayer, NetworkSpec
from .numerics import make_rng
from .trainer import TrainConfig, TrainState, run_protocol, train_base_session


@dataclass(frozen=True)
class Benchmark:
    classes: int = 100
    per_class: int = 40
    test_per_class: int = 10
    image: int = 6  # features are single-channel image x image
    spread: float = 1.0
    sessions: int = 8
    ways: int = 5
    shots: int = 5
    conv_channels: int = 4
    hidden: int = 64
    embedding: int = 32

    def dataset(self, seed: int) -> FscilDataset:
        return make_synthetic(
            self.classes,
            self.per_class,
            self.image * self.image,
            self.spread,
            make_rng(seed),
            sessions=self.sessions,
            ways=self.ways,
            shots=self.shots,
            test_per_class=self.test_per_class,
        )

    def network(self, hidden: int | None = None) -> NetworkSpec:
        conv = ConvLayer(self.conv_channels, 1, 3, 3, self.image, self.image)
        return NetworkSpec(self.image * self.image, (hidden or self.hidden,), self.embedding, 1.0, 0.1, (conv,))


STANDARD = Benchmark()
STANDARD_TRAIN = TrainConfig(steps=300, lr=1.0, gamma=0.5, alpha=0.1, beta_hyper=1e-3, spectrum_every=10, probe_size=16)


@dataclass
class RunResult:
    seed: int
    report: SessionReport
    state: TrainState

    @property
    def final_accuracy(self) -> float:
        return self.report.accuracies[-1]

    @property
    def monotone(self) -> bool:
        a = np.asarray(self.report.accuracies)
        return bool(np.all(np.diff(a) <= 0))

    def condition_cv(self) -> tuple[float, float]:
        """Coefficient of variation of the condition number over the first and last quartile of records."""
        cond = self.state.spectrum_trace.column("condition_number")
        q = max(2, len(cond) // 4)
        first, last = cond[:q], cond[-q:]
        return float(first.std() / first.mean()), float(last.std() / last.mean())


def run_seed(seed: int, bench: Benchmark = STANDARD, cfg: TrainConfig = STANDARD_TRAIN, hidden: int | None = None) -> RunResult:
    ds = bench.dataset(seed)
    state = train_base_session(ds, bench.network(hidden), replace(cfg, seed=seed))
    return RunResult(seed, run_protocol(state, ds), state)
