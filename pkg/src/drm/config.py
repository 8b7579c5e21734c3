"""Experiment presets and the flat configuration used by the command line."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import data as dg
from .conformal import MODES
from .models import Model, build_cnn, build_mlp
from .train import TrainConfig

EXPERIMENTS = ("toy2d", "colored-mnist", "custom-csv")
METHODS = ("drm", "erm")

# offset between the seed of a training sequence and its held-out test sequence
TEST_SEED_OFFSET = 1000


@dataclass
class ExperimentConfig:
    experiment: str = "toy2d"
    method: str = "drm"
    # training (see TrainConfig)
    T: int = 2000
    batch_size: int = 64
    detect_seq_len: int = 1000
    num_detect_seqs: int = 1
    lam: float = 5e5
    sigma: float = 1e-3
    sigma_min: float | None = 1.0
    sigma_rank: float | None = None
    gamma: float = 1.0
    mode: str = "concept"
    lr: float = 5e-3
    erm_epochs: int = 0
    total_epochs: int = 2
    redraw: str = "step"
    alpha: float = 0.01
    # model
    hidden_dims: list = field(default_factory=lambda: [64, 64])
    feature_tap: int = -1
    # data
    test_T: int = 2000
    p_test: float = 0.9
    downsample: bool = True
    data_dir: str | None = None
    data_path: str | None = None
    test_path: str | None = None
    # runs
    seeds: list = field(default_factory=lambda: list(range(10)))
    sweep_seeds: list = field(default_factory=lambda: list(range(5)))

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.experiment == "custom-csv" and not self.data_path:
            raise ValueError("custom-csv needs data_path")
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        self.seeds = [int(s) for s in self.seeds]
        self.sweep_seeds = [int(s) for s in self.sweep_seeds]
        self.train_config(0)  # surface TrainConfig validation errors early

    # ------------------------------------------------------------ (de)serialisation

    @classmethod
    def preset(cls, name: str) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ValueError(f"no preset for experiment {name!r}")
        return cls(**PRESETS[name])

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        base = PRESETS.get(d.get("experiment", "toy2d"), {})
        return cls(**{**base, **d})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return self.from_dict({**self.to_dict(), **changes})

    def overrides(self) -> dict:
        """Fields that differ from the named preset."""
        base = _preset_dict(self.experiment)
        return {k: v for k, v in self.to_dict().items() if base.get(k, None) != v}

    # ------------------------------------------------------------ builders

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(T=self.T, batch_size=self.batch_size, detect_seq_len=self.detect_seq_len,
                           num_detect_seqs=self.num_detect_seqs,
                           lam=0.0 if self.method == "erm" else self.lam, sigma=self.sigma,
                           lr=self.lr, erm_epochs=self.erm_epochs, total_epochs=self.total_epochs,
                           seed=seed, mode=self.mode, gamma=self.gamma, sigma_min=self.sigma_min,
                           sigma_rank=self.sigma_rank, redraw=self.redraw, alpha=self.alpha)

    def build_model(self, seed: int, input_shape=None) -> Model:
        if self.experiment == "colored-mnist":
            side = 14 if self.downsample else 28
            return build_cnn((3, side, side), 2, feature_tap=self.feature_tap if self.feature_tap > 0 else 2,
                             seed=seed)
        dim = 2 if self.experiment == "toy2d" else int(_prod(input_shape))
        return build_mlp(dim, self.hidden_dims, 2, self.feature_tap, seed)

    def load_data(self, seed: int, split: str = "train") -> dg.LabeledSequence:
        """Training or test sequence for ``seed``, generated or read according to the experiment."""
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        if self.experiment == "toy2d":
            if split == "train":
                return dg.gen_toy2d(self.T, dg.TOY2D_TRAIN, seed)
            return dg.gen_toy2d(self.test_T, dg.ShiftSchedule.constant(self.p_test), seed + TEST_SEED_OFFSET)
        if self.experiment == "colored-mnist":
            n = self.T if split == "train" else self.test_T
            sched = (dg.ShiftSchedule.halves(n, 0.1, 0.4) if split == "train"
                     else dg.ShiftSchedule.constant(self.p_test))
            data_seed = seed if split == "train" else seed + TEST_SEED_OFFSET
            return dg.gen_colored_mnist(self.digit_source(data_seed, split, n), n, sched, data_seed,
                                        self.downsample)
        path = self.data_path if split == "train" else self.test_path
        if not path:
            raise ValueError(f"custom-csv has no {split} path configured")
        return dg.read_sequence(path)

    def digit_source(self, seed: int, split: str, n: int):
        """MNIST when ``data_dir`` holds the IDX files, otherwise synthetic digits."""
        if self.data_dir is not None:
            return dg.load_mnist(self.data_dir, split)
        return dg.gen_synthetic_digits(n, seed)

    def uses_synthetic_digits(self) -> bool:
        return self.experiment == "colored-mnist" and self.data_dir is None


def _preset_dict(name: str) -> dict:
    defaults = {f.name: (f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default)
                for f in dataclasses.fields(ExperimentConfig)}
    return {**defaults, **PRESETS.get(name, {})}


def _prod(shape) -> int:
    out = 1
    for s in shape or ():
        out *= int(s)
    return out


PRESETS = {
    "toy2d": dict(experiment="toy2d", T=2000, batch_size=64, detect_seq_len=1000, num_detect_seqs=1,
                  lam=5e5, sigma=1e-3, sigma_min=1.0, lr=5e-3, erm_epochs=0, total_epochs=2,
                  mode="concept", hidden_dims=[64, 64], feature_tap=-1,
                  seeds=list(range(10)), sweep_seeds=list(range(5))),
    "colored-mnist": dict(experiment="colored-mnist", T=2000, batch_size=64, detect_seq_len=1000,
                          num_detect_seqs=3, lam=5e6, sigma=0.1, sigma_min=None, lr=5e-3, erm_epochs=2,
                          total_epochs=3, mode="concept", feature_tap=2,
                          seeds=list(range(3)), sweep_seeds=list(range(3))),
    "custom-csv": dict(experiment="custom-csv", T=2000, num_detect_seqs=1, lam=5e5, sigma=1e-3,
                       sigma_min=1.0, mode="concept", hidden_dims=[64, 64], feature_tap=-1,
                       seeds=[0], sweep_seeds=list(range(5))),
}
