"""Session protocol, episode sampling, mixup class extension, NCM evaluation and metrics."""

from __future__ import annotations

import csv
import json
from collections.abc import Callable
from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np

from .errors import ClassificationError, ConfigError, SamplingError


@dataclass(frozen=True)
class FscilDataset:
    """Feature vectors split into a base session and ``sessions`` incremental ones.

    Classes ``0 .. base_classes-1`` form session 0; session ``s >= 1`` owns
    classes ``base_classes + (s-1)*ways .. base_classes + s*ways - 1``.
    """

    features: np.ndarray
    labels: np.ndarray
    session: np.ndarray
    is_test: np.ndarray
    base_classes: int
    sessions: int
    ways: int
    shots: int

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def inc_classes(self) -> int:
        return self.sessions * self.ways

    @property
    def num_classes(self) -> int:
        return self.base_classes + self.inc_classes

    def session_of_class(self, c: int) -> int:
        return 0 if c < self.base_classes else 1 + (c - self.base_classes) // self.ways

    def classes_of(self, session: int) -> np.ndarray:
        if session == 0:
            return np.arange(self.base_classes)
        lo = self.base_classes + (session - 1) * self.ways
        return np.arange(lo, lo + self.ways)

    def train_indices(self, session: int) -> np.ndarray:
        return np.flatnonzero((self.session == session) & ~self.is_test)

    def test_indices(self, upto_session: int) -> np.ndarray:
        return np.flatnonzero((self.session <= upto_session) & self.is_test)

    def validate(self) -> None:
        for c in range(self.num_classes):
            owners = np.unique(self.session[self.labels == c])
            if owners.size > 1 or (owners.size == 1 and owners[0] != self.session_of_class(c)):
                raise ConfigError(f"class {c} appears in sessions {owners.tolist()}")
        for s in range(1, self.sessions + 1):
            n = self.train_indices(s).size
            if n != self.ways * self.shots:
                raise ConfigError(f"session {s} has {n} train samples, expected {self.ways * self.shots}")

    # -- file format: CSV (label,f0..f{d-1}) + JSON manifest

    def save(self, csv_path, manifest_path=None) -> None:
        csv_path = Path(csv_path)
        manifest_path = Path(manifest_path) if manifest_path else csv_path.with_suffix(".json")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", *(f"f{i}" for i in range(self.dim))])
            for y, row in zip(self.labels, self.features):
                w.writerow([int(y), *(repr(float(v)) for v in row)])
        manifest = {
            "base_classes": self.base_classes,
            "sessions": self.sessions,
            "ways": self.ways,
            "shots": self.shots,
            "split": {
                "session": self.session.astype(int).tolist(),
                "test": self.is_test.astype(int).tolist(),
            },
        }
        manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")

    @classmethod
    def load(cls, csv_path, manifest_path=None) -> FscilDataset:
        csv_path = Path(csv_path)
        manifest_path = Path(manifest_path) if manifest_path else csv_path.with_suffix(".json")
        with open(csv_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "label":
                raise ConfigError(f"{csv_path}: header must start with 'label'")
            rows = [r for r in reader if r]
        labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
        feats = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(len(rows), len(header) - 1)
        m = json.loads(Path(manifest_path).read_text())
        ds = cls(
            feats,
            labels,
            np.asarray(m["split"]["session"], dtype=np.int64),
            np.asarray(m["split"]["test"], dtype=bool),
            int(m["base_classes"]),
            int(m["sessions"]),
            int(m["ways"]),
            int(m["shots"]),
        )
        if ds.session.size != labels.size or ds.is_test.size != labels.size:
            raise ConfigError("manifest split length does not match the number of samples")
        ds.validate()
        return ds


def make_synthetic(
    classes: int,
    per_class: int,
    dim: int,
    spread: float,
    rng: np.random.Generator,
    sessions: int = 8,
    ways: int = 5,
    shots: int = 5,
    test_per_class: int | None = None,
) -> FscilDataset:
    """Gaussian blobs around random unit-norm class means.

    Base classes get ``per_class`` samples (``test_per_class`` of them held
    out); each incremental class gets ``shots`` train samples plus the same
    number of test samples. Noise has total standard deviation ``spread``.
    """
    base = classes - sessions * ways
    if min(sessions, ways, shots) < 0 or ways < 1 or shots < 1:
        raise ConfigError("sessions must be >= 0, ways and shots >= 1")
    if base < ways:
        raise ConfigError(
            f"{classes} classes cannot fill {sessions} sessions of {ways} ways plus a base session of >= {ways} classes"
        )
    if test_per_class is None:
        test_per_class = max(1, per_class // 4)
    if per_class <= test_per_class:
        raise ConfigError(f"per_class={per_class} leaves no base training samples (test_per_class={test_per_class})")
    if spread < 0 or dim < 1:
        raise ConfigError("spread must be >= 0 and dim >= 1")
    means = rng.standard_normal((classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    feats, labels, sess, test = [], [], [], []
    for c in range(classes):
        s = 0 if c < base else 1 + (c - base) // ways
        n_train = per_class - test_per_class if s == 0 else shots
        n = n_train + test_per_class
        feats.append(means[c] + spread / np.sqrt(dim) * rng.standard_normal((n, dim)))
        labels.append(np.full(n, c))
        sess.append(np.full(n, s))
        test.append(np.arange(n) >= n_train)
    return FscilDataset(
        np.concatenate(feats),
        np.concatenate(labels).astype(np.int64),
        np.concatenate(sess).astype(np.int64),
        np.concatenate(test),
        base,
        sessions,
        ways,
        shots,
    )


# ---------------------------------------------------------------- episodes


@dataclass(frozen=True)
class Episode:
    classes: np.ndarray  # global ids, position = sub-domain label
    support_x: np.ndarray  # class-major: rows [c*m:(c+1)*m] belong to classes[c]
    support_y: np.ndarray  # one-hot over the episode's n classes
    query_x: np.ndarray
    query_y: np.ndarray
    subdomain_labels: np.ndarray  # y* of each query row
    support_index: np.ndarray
    query_index: np.ndarray

    @property
    def ways(self) -> int:
        return self.classes.size

    @property
    def support_sub(self) -> np.ndarray:
        return np.argmax(self.support_y, axis=1)

    @property
    def support_labels(self) -> np.ndarray:
        return self.classes[self.support_sub]

    @property
    def query_labels(self) -> np.ndarray:
        return self.classes[self.subdomain_labels]


def sample_episode(ds: FscilDataset, ways: int, shots: int, queries: int, rng: np.random.Generator) -> Episode:
    if ways < 1 or shots < 1 or queries < 1:
        raise SamplingError(f"episode needs ways, shots and queries >= 1 (got {ways}, {shots}, {queries})")
    train = ds.train_indices(0)
    by_class = {c: train[ds.labels[train] == c] for c in range(ds.base_classes)}
    eligible = np.array([c for c, idx in by_class.items() if idx.size >= shots + queries])
    if eligible.size < ways:
        raise SamplingError(
            f"only {eligible.size} base classes have >= {shots + queries} training samples; need {ways}"
        )
    classes = rng.choice(eligible, size=ways, replace=False)
    s_idx, q_idx = [], []
    for c in classes:
        pick = rng.choice(by_class[c], size=shots + queries, replace=False)
        s_idx.append(pick[:shots])
        q_idx.append(pick[shots:])
    s_idx = np.concatenate(s_idx)
    q_idx = np.concatenate(q_idx)
    eye = np.eye(ways)
    return Episode(
        classes=classes,
        support_x=ds.features[s_idx],
        support_y=eye[np.repeat(np.arange(ways), shots)],
        query_x=ds.features[q_idx],
        query_y=eye[np.repeat(np.arange(ways), queries)],
        subdomain_labels=np.repeat(np.arange(ways), queries),
        support_index=s_idx,
        query_index=q_idx,
    )


# ---------------------------------------------------------------- mixup class extension


def virtual_class_id(a, b, real_class_count: int):
    """Id of the virtual class for the unordered pair ``{a, b}``, ``a != b``."""
    a, b = np.minimum(a, b), np.maximum(a, b)
    c = real_class_count
    return c + a * (2 * c - a - 1) // 2 + (b - a - 1)


def virtual_pair(vid: int, real_class_count: int) -> tuple[int, int]:
    c = real_class_count
    k = vid - c
    if not 0 <= k < comb(c, 2):
        raise ValueError(f"{vid} is not a virtual class id for {c} real classes")
    a = 0
    while k >= c - a - 1:
        k -= c - a - 1
        a += 1
    return a, a + 1 + k


def extended_class_count(real_class_count: int) -> int:
    return real_class_count + comb(real_class_count, 2)


@dataclass(frozen=True)
class MixBatch:
    mixed_x: np.ndarray
    mixed_class_ids: np.ndarray
    mix_lambda: np.ndarray
    partner: np.ndarray  # row index mixed into each row
    real_class_count: int
    virtual_class_count: int
    degenerate: bool = False


def mixup_extend(
    batch_x,
    batch_y,
    alpha: float,
    real_class_count: int,
    rng: np.random.Generator,
    lam: float | None = None,
) -> MixBatch:
    """Convex mixup of each row with a permuted partner; distinct-class pairs get a virtual label.

    ``lam`` fixes every mixing coefficient instead of drawing Beta(alpha, alpha).
    """
    x = np.asarray(batch_x, dtype=np.float64)
    y = np.asarray(batch_y, dtype=np.int64)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n = x.shape[0]
    if np.unique(y).size < 2:
        return MixBatch(x.copy(), y.copy(), np.ones(n), np.arange(n), real_class_count, comb(real_class_count, 2), True)
    perm = rng.permutation(n)
    lam_rows = np.full(n, float(lam)) if lam is not None else rng.beta(alpha, alpha, size=n)
    mixed = lam_rows[:, None] * x + (1.0 - lam_rows[:, None]) * x[perm]
    ya, yb = y, y[perm]
    ids = np.where(ya == yb, ya, virtual_class_id(ya, yb, real_class_count))
    ids = np.where(lam_rows == 1.0, ya, np.where(lam_rows == 0.0, yb, ids))
    return MixBatch(mixed, ids.astype(np.int64), lam_rows, perm, real_class_count, comb(real_class_count, 2))


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class SessionAccuracy:
    session: int
    accuracy: float
    base_accuracy: float
    novel_accuracy: float  # nan for session 0


def _normalize_rows(e: np.ndarray, what: str, index: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(e, axis=1)
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        raise ClassificationError(f"zero-norm embedding for {what} {int(index[bad[0]])}")
    return e / norms[:, None]


def class_prototypes(embed: Callable[[np.ndarray], np.ndarray], ds: FscilDataset, upto_session: int):
    classes, protos = [], []
    for s in range(upto_session + 1):
        idx = ds.train_indices(s)
        emb = np.asarray(embed(ds.features[idx]))
        for c in ds.classes_of(s):
            rows = ds.labels[idx] == c
            if not rows.any():
                raise ClassificationError(f"class {c} has no training samples")
            classes.append(c)
            protos.append(emb[rows].mean(axis=0))
    return np.array(classes), np.array(protos)


def ncm_evaluate(embed: Callable[[np.ndarray], np.ndarray], ds: FscilDataset, upto_session: int) -> SessionAccuracy:
    """Cosine nearest-class-mean accuracy on the joint test set of sessions ``0..upto_session``.

    ``embed`` maps a batch of feature rows to a batch of embeddings.
    """
    if not 0 <= upto_session <= ds.sessions:
        raise ValueError(f"upto_session must be in [0, {ds.sessions}]")
    classes, protos = class_prototypes(embed, ds, upto_session)
    protos = _normalize_rows(protos, "prototype of class", classes)
    test = ds.test_indices(upto_session)
    emb = _normalize_rows(np.asarray(embed(ds.features[test]), dtype=np.float64), "test sample", test)
    pred = classes[np.argmax(emb @ protos.T, axis=1)]
    truth = ds.labels[test]
    hit = pred == truth
    base = truth < ds.base_classes
    return SessionAccuracy(
        upto_session,
        float(hit.mean()),
        float(hit[base].mean()) if base.any() else float("nan"),
        float(hit[~base].mean()) if (~base).any() else float("nan"),
    )


# ---------------------------------------------------------------- metrics


def harmonic_mean(a: float, b: float) -> float:
    return 2.0 * a * b / (a + b) if a > 0 and b > 0 else 0.0


@dataclass(frozen=True)
class SessionReport:
    accuracies: tuple[float, ...]
    pd: float
    base_acc: float
    incremental_acc: float
    harmonic_mean: float

    def to_dict(self) -> dict:
        return {
            "accuracies": list(self.accuracies),
            "pd": self.pd,
            "base_acc": self.base_acc,
            "incremental_acc": self.incremental_acc,
            "harmonic_mean": self.harmonic_mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SessionReport:
        return cls(tuple(d["accuracies"]), d["pd"], d["base_acc"], d["incremental_acc"], d["harmonic_mean"])


def finalize_report(accuracies, base_acc: float, incremental_acc: float) -> SessionReport:
    accs = tuple(float(a) for a in accuracies)
    if not accs:
        raise ValueError("need at least one session accuracy")
    return SessionReport(accs, accs[0] - accs[-1], float(base_acc), float(incremental_acc), harmonic_mean(base_acc, incremental_acc))
