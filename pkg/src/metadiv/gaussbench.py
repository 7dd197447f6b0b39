"""Synthetic 1-D Gaussian few-shot benchmarks.

A benchmark is four numbers (mu_m, sigma_m, mu_s, sigma_s): class means are
drawn from N(mu_m, sigma_m) and class standard deviations are |N(mu_s,
sigma_s)|. Each benchmark materializes 100 meta-train, 100 meta-test, and 100
meta-val classes with 1000 points per class; episodes are n-way k-shot tasks
drawn from those pools. Raising sigma_m spreads class means apart, which is
the single knob that controls task diversity here.

The module also provides the closed-form squared Hellinger distance between
two Gaussian classes, the Monte Carlo distribution-diversity coefficient
built on it, and a Bayes-optimal accuracy oracle (the true class densities
are known, so the best possible classifier is computable and upper-bounds
any trained model).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, InvalidInputError
from .numerics import RngStream, mean_ci95

__all__ = [
    "SPLITS",
    "POINTS_PER_CLASS",
    "CLASSES_PER_SPLIT",
    "BenchmarkSpec",
    "ClassDistribution",
    "FewShotTask",
    "DiversityResult",
    "GaussianBenchmark",
    "sample_benchmark",
    "sample_task",
    "hellinger_squared",
    "hellinger_diversity",
    "bayes_accuracy",
    "export_benchmark",
    "load_benchmark",
]

SPLITS = ("meta_train", "meta_test", "meta_val")
POINTS_PER_CLASS = 1000
CLASSES_PER_SPLIT = 100


@dataclass(frozen=True)
class BenchmarkSpec:
    """Hyperprior of a Gaussian benchmark: class-mean mean/stddev and
    class-stddev mean/stddev."""

    mu_m: float
    sigma_m: float
    mu_s: float
    sigma_s: float

    def __post_init__(self):
        for name in ("mu_m", "sigma_m", "mu_s", "sigma_s"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise InvalidInputError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if self.sigma_m < 0 or self.sigma_s < 0:
            raise InvalidInputError("sigma_m and sigma_s must be >= 0")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.mu_m, self.sigma_m, self.mu_s, self.sigma_s)


@dataclass(frozen=True)
class ClassDistribution:
    """One sampled class: its true (mu, sigma) and the materialized point pool."""

    class_id: int
    split: str
    mu: float
    sigma: float
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidInputError(f"unknown split {self.split!r}")
        if not (self.sigma > 0):
            raise InvalidInputError(f"class sigma must be > 0, got {self.sigma}")
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size != POINTS_PER_CLASS:
            raise InvalidInputError(f"class pool must hold {POINTS_PER_CLASS} points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class FewShotTask:
    """An n-way episode: labels 0..n-1 follow way order, support/query index
    sets into each class pool are disjoint."""

    way_classes: tuple[ClassDistribution, ...]
    support_x: np.ndarray = field(repr=False)
    support_y: np.ndarray = field(repr=False)
    query_x: np.ndarray = field(repr=False)
    query_y: np.ndarray = field(repr=False)
    support_indices: np.ndarray = field(repr=False)
    query_indices: np.ndarray = field(repr=False)
    task_id: str

    @property
    def n_way(self) -> int:
        return len(self.way_classes)

    @property
    def k_support(self) -> int:
        return self.support_indices.shape[1]

    @property
    def k_query(self) -> int:
        return self.query_indices.shape[1]


@dataclass(frozen=True)
class DiversityResult:
    """A diversity estimate with its 95% CI half-width.

    For task diversity, ``pairwise`` is the symmetric zero-diagonal distance
    matrix over ``n_tasks`` embedded tasks and ``n_pairs`` counts its distinct
    off-diagonal pairs ((n^2-n)/2). For the distribution (Hellinger) estimator
    there is no task set: ``pairwise`` is None and n_tasks = n_pairs = the
    number of independently drawn class pairs.
    """

    mean: float
    ci95: float
    n_tasks: int
    n_pairs: int
    pairwise: np.ndarray | None = None


def sample_benchmark(spec: BenchmarkSpec, rng: RngStream) -> list[ClassDistribution]:
    """Materialize the 300 classes of a benchmark (100 per split, pool of
    1000 points each), sequentially from one stream for reproducibility."""
    gen = rng.generator
    classes = []
    class_id = 0
    for split in SPLITS:
        for _ in range(CLASSES_PER_SPLIT):
            mu = float(gen.normal(spec.mu_m, spec.sigma_m))
            sigma = float(abs(gen.normal(spec.mu_s, spec.sigma_s)))
            if sigma == 0.0:
                raise InvalidInputError(
                    "spec produced a zero class sigma (mu_s = sigma_s = 0?)"
                )
            points = gen.normal(mu, sigma, POINTS_PER_CLASS)
            classes.append(ClassDistribution(class_id, split, mu, sigma, points))
            class_id += 1
    return classes


def sample_task(
    classes,
    n: int,
    k_support: int,
    k_query: int,
    rng: RngStream,
) -> FewShotTask:
    """Draw an n-way (k_support + k_query)-shot episode from a split subset.

    Ways are distinct classes chosen uniformly without replacement; shots are
    drawn without replacement from each class's materialized pool, so support
    and query never share a point.
    """
    classes = list(classes)
    if n < 2:
        raise InvalidInputError("a task needs n >= 2 ways")
    if len(classes) < n:
        raise InvalidInputError(f"split has {len(classes)} classes, need {n}")
    pool = len(classes[0].points)
    if k_support < 1 or k_query < 1 or k_support + k_query > pool:
        raise InvalidInputError(
            f"k_support + k_query must be in [2, {pool}], got {k_support}+{k_query}"
        )
    gen = rng.generator
    chosen = gen.choice(len(classes), size=n, replace=False)
    ways = tuple(classes[int(i)] for i in chosen)
    support_idx = np.empty((n, k_support), dtype=np.int64)
    query_idx = np.empty((n, k_query), dtype=np.int64)
    for w, cls in enumerate(ways):
        idx = gen.choice(pool, size=k_support + k_query, replace=False)
        support_idx[w] = idx[:k_support]
        query_idx[w] = idx[k_support:]
    support_x = np.concatenate(
        [cls.points[support_idx[w]] for w, cls in enumerate(ways)]
    ).reshape(-1, 1)
    query_x = np.concatenate(
        [cls.points[query_idx[w]] for w, cls in enumerate(ways)]
    ).reshape(-1, 1)
    support_y = np.repeat(np.arange(n, dtype=np.int64), k_support)
    query_y = np.repeat(np.arange(n, dtype=np.int64), k_query)
    task_id = "c" + "-".join(str(cls.class_id) for cls in ways)
    return FewShotTask(
        ways, support_x, support_y, query_x, query_y, support_idx, query_idx, task_id
    )


def hellinger_squared(c1, c2) -> float:
    """Closed-form squared Hellinger distance between two 1-D Gaussians.

    ``1 - sqrt(2*s1*s2/(s1^2+s2^2)) * exp(-(m1-m2)^2 / (4*(s1^2+s2^2)))``,
    always in [0, 1]; 0 iff the distributions coincide.
    """
    m1, s1 = float(c1[0]), float(c1[1])
    m2, s2 = float(c2[0]), float(c2[1])
    if not (s1 > 0 and s2 > 0):
        raise InvalidInputError("sigmas must be > 0")
    var_sum = s1 * s1 + s2 * s2
    bc = np.sqrt(2.0 * s1 * s2 / var_sum) * np.exp(-0.25 * (m1 - m2) ** 2 / var_sum)
    return float(np.clip(1.0 - bc, 0.0, 1.0))


def hellinger_diversity(
    spec: BenchmarkSpec, n_pairs: int = 100000, rng: RngStream | None = None
) -> DiversityResult:
    """Distribution diversity: expected squared Hellinger distance between two
    classes drawn independently from the benchmark's hyperprior.

    Pairs are resampled fresh (not restricted to the 300 materialized
    classes), estimated by Monte Carlo with a 95% CI half-width.
    """
    if n_pairs < 100:
        raise InvalidInputError("n_pairs must be >= 100")
    if rng is None:
        raise InvalidInputError("an RngStream is required")
    gen = rng.generator
    mu1 = gen.normal(spec.mu_m, spec.sigma_m, n_pairs)
    s1 = np.abs(gen.normal(spec.mu_s, spec.sigma_s, n_pairs))
    mu2 = gen.normal(spec.mu_m, spec.sigma_m, n_pairs)
    s2 = np.abs(gen.normal(spec.mu_s, spec.sigma_s, n_pairs))
    if np.any(s1 == 0.0) or np.any(s2 == 0.0):
        raise InvalidInputError("spec produced a zero class sigma (mu_s = sigma_s = 0?)")
    var_sum = s1 * s1 + s2 * s2
    h2 = 1.0 - np.sqrt(2.0 * s1 * s2 / var_sum) * np.exp(
        -0.25 * (mu1 - mu2) ** 2 / var_sum
    )
    h2 = np.clip(h2, 0.0, 1.0)
    mean, ci = mean_ci95(h2)
    return DiversityResult(mean, ci, n_tasks=n_pairs, n_pairs=n_pairs, pairwise=None)


def bayes_accuracy(task: FewShotTask, n_mc: int, rng: RngStream) -> tuple[float, float]:
    """Accuracy of the maximum-density classifier on fresh draws from the
    task's true class distributions (uniform prior over ways).

    This is the best any model can do on the task in expectation; the Monte
    Carlo CI half-width quantifies the estimate's own noise.
    """
    if n_mc < 2:
        raise InsufficientDataError("need n_mc >= 2 draws per way")
    gen = rng.generator
    n = task.n_way
    mus = np.array([c.mu for c in task.way_classes])
    sigmas = np.array([c.sigma for c in task.way_classes])
    # draws[i, j] ~ class i; log density of every draw under every class
    draws = gen.normal(mus[:, None], sigmas[:, None], size=(n, n_mc))
    diff = draws[None, :, :] - mus[:, None, None]
    log_dens = -np.log(sigmas)[:, None, None] - 0.5 * (diff / sigmas[:, None, None]) ** 2
    predicted = np.argmax(log_dens, axis=0)
    correct = (predicted == np.arange(n)[:, None]).astype(np.float64)
    return mean_ci95(correct.ravel())


@dataclass(frozen=True)
class GaussianBenchmark:
    """A materialized benchmark: spec, generating seed, and the 300 classes."""

    spec: BenchmarkSpec
    seed: int
    classes: tuple[ClassDistribution, ...]

    @classmethod
    def generate(cls, spec: BenchmarkSpec, seed: int) -> "GaussianBenchmark":
        classes = sample_benchmark(spec, RngStream(seed))
        return cls(spec=spec, seed=int(seed), classes=tuple(classes))

    def split(self, name: str) -> list[ClassDistribution]:
        if name not in SPLITS:
            raise InvalidInputError(f"unknown split {name!r}")
        return [c for c in self.classes if c.split == name]


def export_benchmark(path, bench: GaussianBenchmark) -> None:
    """Write a benchmark as JSON: spec, seed, and per-class (id, split, mu,
    sigma). Point pools are regenerated from the seed on load, not stored."""
    payload = {
        "spec": {
            "mu_m": bench.spec.mu_m,
            "sigma_m": bench.spec.sigma_m,
            "mu_s": bench.spec.mu_s,
            "sigma_s": bench.spec.sigma_s,
        },
        "seed": bench.seed,
        "classes": [
            {"class_id": c.class_id, "split": c.split, "mu": c.mu, "sigma": c.sigma}
            for c in bench.classes
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_benchmark(path) -> GaussianBenchmark:
    """Regenerate a benchmark from its JSON export, verifying that the
    regenerated class parameters match the recorded ones exactly."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    spec = BenchmarkSpec(**payload["spec"])
    bench = GaussianBenchmark.generate(spec, payload["seed"])
    recorded = payload["classes"]
    if len(recorded) != len(bench.classes):
        raise InvalidInputError("class count mismatch in benchmark export")
    for rec, cls in zip(recorded, bench.classes):
        if (
            rec["class_id"] != cls.class_id
            or rec["split"] != cls.split
            or rec["mu"] != cls.mu
            or rec["sigma"] != cls.sigma
        ):
            raise InvalidInputError(
                f"benchmark export does not reproduce class {rec['class_id']}; "
                "generator version mismatch?"
            )
    return bench
