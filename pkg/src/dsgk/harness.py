"""Training orchestration, evaluation, ablations, sweeps and the metrics stream."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from . import __version__
from . import network as nn
from .data import DomainDataset, PairedBatchSampler, SyntheticTaskSpec, generate_task
from .errors import Antipodal, MissingLabels, NoValidClasses
from .losses import (
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    FEATURE,
    LossBreakdown,
    ObjectiveSpec,
    categorical_sphere_kernel_geodesic_loss,
    sphere_kernel_geodesic_loss,
    total_loss,
)
from .moments import DEFAULT_KAPPA, FeatureBatch
from .pseudo import ThresholdSchedule, default_schedule, select_pseudo_labels

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (1, 2, 3, 4, 5)
MIN_PSEUDO_BATCH = 2


@dataclass(frozen=True)
class RunConfig:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    kappa: float = DEFAULT_KAPPA
    T: int = 5
    schedule: Optional[Tuple[float, ...]] = None
    iterations_per_round: Optional[int] = None  # None: one pass over the paired batches
    warmup_epochs: int = 4
    batch_size: int = 64
    learning_rate: float = nn.DEFAULT_LR
    optimizer: str = "sgd_momentum"
    mode: str = FEATURE
    features_for_loss: str = "softmax"
    discrepancy: str = "sphere"
    hidden: Tuple[int, ...] = nn.DEFAULT_HIDDEN
    seed: int = 0
    use_K: bool = True
    use_T: bool = True
    use_C: bool = True
    evaluate: bool = True
    record_timing: bool = False

    def thresholds(self) -> ThresholdSchedule:
        if self.schedule is not None:
            if len(self.schedule) != self.T:
                raise ValueError(f"schedule has {len(self.schedule)} entries but T={self.T}")
            return ThresholdSchedule(tuple(self.schedule))
        if self.T == 0:
            return ThresholdSchedule(())
        return default_schedule(self.T)

    def objective(self, **overrides) -> ObjectiveSpec:
        kw = dict(
            alpha=self.alpha, beta=self.beta, kappa=self.kappa, mode=self.mode,
            features_for_loss=self.features_for_loss, use_K=self.use_K,
            use_T=self.use_T, use_C=self.use_C, discrepancy=self.discrepancy,
        )
        kw.update(overrides)
        return ObjectiveSpec(**kw)


# ---------------------------------------------------------------------------
# metrics stream: one record per line, "key:value" pairs separated by spaces


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return "[" + ",".join(_fmt(x) for x in v) + "]"
    if v is None:
        return "none"
    return str(v)


def format_record(rec: Dict) -> str:
    return " ".join(f"{k}:{_fmt(v)}" for k, v in rec.items())


def parse_record(line: str) -> Dict[str, str]:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition(":")
        out[k] = v
    return out


@dataclass
class TrainResult:
    net: nn.Network
    records: List[Dict] = field(default_factory=list)

    @property
    def evals(self) -> Dict[str, Dict]:
        return {r["phase"]: r for r in self.records if r["record"] == "eval"}

    @property
    def final(self) -> Dict:
        return self.evals["final"]

    def lines(self) -> List[str]:
        return [format_record(r) for r in self.records]


# ---------------------------------------------------------------------------
# evaluation (the only code that reads target labels)


def evaluate(net: nn.Network, dataset: DomainDataset) -> float:
    """Fraction of rows whose inference-mode argmax matches the label."""
    if dataset.labels is None:
        raise MissingLabels(f"dataset {dataset.name!r} has no labels to evaluate against")
    probs = nn.forward(net, dataset.features, training=False).probs
    return float(np.mean(np.argmax(probs, axis=1) == dataset.labels))


def divergence_proxy(
    net: nn.Network,
    source: DomainDataset,
    target: DomainDataset,
    config: RunConfig,
) -> Tuple[float, float, float]:
    """Label-free estimate of L_K + mean_c L_K^c over one fixed pass of paired batches.

    Target classes come from the classifier's own argmax; the sampler and
    class subsampling use a dedicated seed so successive calls are comparable.
    Returns ``(proxy, mean L_K, mean L_K^c)``.
    """
    target = target.unlabeled()
    sampler = PairedBatchSampler(source, target, config.batch_size, seed=config.seed + 7919)
    rng = np.random.default_rng(config.seed + 104729)
    use_logits = config.features_for_loss == "logits"
    lk, lkc = [], []
    for bs, bt in sampler.epoch():
        out_s = nn.forward(net, bs.data, training=False)
        out_t = nn.forward(net, bt.data, training=False)
        fs = out_s.logits if use_logits else out_s.probs
        ft = out_t.logits if use_logits else out_t.probs
        try:
            lk.append(sphere_kernel_geodesic_loss(fs, ft, config.kappa, config.mode).value)
        except Antipodal:
            continue
        yt = np.argmax(out_t.probs, axis=1)
        try:
            c = categorical_sphere_kernel_geodesic_loss(
                FeatureBatch(fs, bs.labels), FeatureBatch(ft, yt), config.kappa, config.mode, rng
            )
            lkc.append(c.value)
        except NoValidClasses:
            lkc.append(0.0)
    m_k = float(np.mean(lk)) if lk else float("nan")
    m_c = float(np.mean(lkc)) if lkc else float("nan")
    return m_k + m_c, m_k, m_c


# ---------------------------------------------------------------------------
# training


def _seeds(seed: int):
    ss = np.random.SeedSequence(seed)
    init, sampler, pseudo, cat = ss.spawn(4)
    return (
        int(init.generate_state(1)[0]),
        int(sampler.generate_state(1)[0]),
        np.random.default_rng(pseudo),
        np.random.default_rng(cat),
    )


def _num_classes(source: DomainDataset) -> int:
    if source.labels is None:
        raise MissingLabels("the source domain must be labeled")
    return int(source.labels.max()) + 1


def train(
    config: RunConfig,
    source: DomainDataset,
    target: DomainDataset,
    sink: Optional[TextIO] = None,
    num_classes: Optional[int] = None,
) -> TrainResult:
    """Warm up on L_S (+ alpha L_K), then run T pseudo-label refinement rounds.

    ``target`` may carry labels; training only ever sees
    ``target.unlabeled()``, and labels feed the evaluation fields of the
    metrics records when ``config.evaluate`` is set.
    """
    schedule = config.thresholds()
    C = num_classes or _num_classes(source)
    held_out = target if (config.evaluate and target.labels is not None) else None
    target_train = target.unlabeled()

    init_seed, sampler_seed, pseudo_rng, cat_rng = _seeds(config.seed)
    net = nn.init_network(source.dim, tuple(config.hidden) + (C,), seed=init_seed)
    opt = nn.OptimizerState(config.optimizer, config.learning_rate)
    sampler = PairedBatchSampler(source, target_train, config.batch_size, sampler_seed)
    result = TrainResult(net)

    def emit(rec: Dict) -> None:
        result.records.append(rec)
        if sink is not None:
            sink.write(format_record(rec) + "\n")

    header = {"record": "config", "version": f"dsgk-{__version__}"}
    header.update({k: v for k, v in asdict(config).items()})
    header["schedule"] = tuple(schedule)
    emit(header)

    def batches():
        while True:
            yield from sampler.epoch()

    stream = batches()
    needs_pseudo = config.use_T or config.use_C

    def step(phase: str, t: int, i: int, spec: ObjectiveSpec, threshold: Optional[float]):
        t0 = time.perf_counter()
        bs, bt = next(stream)
        use_pseudo = threshold is not None and needs_pseudo
        probs_t = None
        if use_pseudo or held_out is not None:
            # one inference pass feeds both pseudo-labeling and the evaluator
            probs_t = nn.forward(net, target_train.features, training=False).probs
        xp = yp = None
        pseudo = None
        if use_pseudo:
            pseudo = select_pseudo_labels(probs_t, threshold)
            # a lone pseudo-labeled row cannot form batch-norm statistics
            if len(pseudo) >= MIN_PSEUDO_BATCH:
                k = min(config.batch_size, len(pseudo))
                pick = np.sort(pseudo_rng.choice(len(pseudo), size=k, replace=False))
                xp = target_train.features[pseudo.indices[pick]]
                yp = pseudo.labels[pick]
        try:
            breakdown, grads = total_loss(net, bs.data, bs.labels, bt.data, xp, yp, spec, cat_rng)
        except Antipodal as exc:
            log.warning("skipping %s step t=%d i=%d: %s", phase, t, i, exc)
            return
        nn.optimizer_step(net, grads, opt)
        rec = {"record": "iter", "phase": phase, "round": t, "iter": i}
        rec.update(_breakdown_fields(breakdown))
        rec["pseudo_count"] = len(pseudo) if pseudo is not None else 0
        rec["pseudo_precision"] = float("nan")
        rec["target_accuracy"] = float("nan")
        if held_out is not None:
            # measured on the classifier as it was when this step's batch was drawn
            if pseudo is not None and len(pseudo):
                rec["pseudo_precision"] = float(
                    np.mean(pseudo.labels == held_out.labels[pseudo.indices])
                )
            rec["target_accuracy"] = float(np.mean(np.argmax(probs_t, axis=1) == held_out.labels))
        rec["wall_ms"] = (time.perf_counter() - t0) * 1e3 if config.record_timing else 0.0
        emit(rec)

    emit(_eval_record("init", net, source, target_train, held_out, config))
    warm = config.objective(use_T=False, use_C=False)
    for e in range(config.warmup_epochs):
        for i in range(sampler.steps_per_epoch):
            step("warmup", 0, e * sampler.steps_per_epoch + i, warm, None)
    emit(_eval_record("warmup_end", net, source, target_train, held_out, config))

    spec = config.objective()
    iters = config.iterations_per_round or sampler.steps_per_epoch
    for t, p_t in enumerate(schedule, start=1):
        for i in range(iters):
            step("refine", t, i, spec, p_t)
    emit(_eval_record("final", net, source, target_train, held_out, config))
    return result


def _breakdown_fields(b: LossBreakdown) -> Dict:
    return {
        "mode": b.mode,
        "l_s": b.l_s,
        "l_t": b.l_t,
        "l_k": b.l_k,
        "l_k_cat": b.l_k_cat,
        "alpha": b.alpha,
        "beta": b.beta,
        "total": b.total,
        "divergence_proxy": b.divergence_proxy,
        "kernel_value": b.kernel_value,
        "valid_class_count": b.valid_class_count,
    }


def _eval_record(phase, net, source, target_train, held_out, config) -> Dict:
    proxy, lk, lkc = divergence_proxy(net, source, target_train, config)
    return {
        "record": "eval",
        "phase": phase,
        "divergence_proxy": proxy,
        "l_k": lk,
        "l_k_cat": lkc,
        "source_accuracy": evaluate(net, source),
        "target_accuracy": evaluate(net, held_out) if held_out is not None else float("nan"),
    }


# ---------------------------------------------------------------------------
# experiments over seeds


# Row order follows the ablation table; the flags are (use_K, use_T, use_C).
ABLATION_VARIANTS: Tuple[Tuple[str, Tuple[bool, bool, bool]], ...] = (
    ("DSGK-K/T/C", (False, False, False)),
    ("DSGK-C/T", (True, False, False)),
    ("DSGK-K/C", (False, True, False)),
    ("DSGK-K/T", (False, False, True)),
    ("DSGK-C", (True, True, False)),
    ("DSGK-T", (True, False, True)),
    ("DSGK-K", (False, True, True)),
    ("DSGK", (True, True, True)),
)

SWEEP_GRIDS = {
    "alpha": (0.06, 0.07, 0.08, 0.09, 0.1, 0.2, 0.3, 0.4, 0.5),
    "beta": (0.006, 0.007, 0.008, 0.009, 0.01, 0.02, 0.03, 0.04, 0.05),
    "T": (1, 2, 3, 4, 5, 6, 7, 8, 9),
}


def task_for_seed(task: SyntheticTaskSpec, seed: int) -> SyntheticTaskSpec:
    return replace(task, seed=seed)


def _run_one(args) -> Dict:
    config, task = args
    source, target = generate_task(task)
    res = train(config, source, target)
    final = res.final
    return {
        "seed": config.seed,
        "target_accuracy": final["target_accuracy"],
        "source_accuracy": final["source_accuracy"],
        "divergence_proxy": final["divergence_proxy"],
        "init_divergence_proxy": res.evals["init"]["divergence_proxy"],
        "warmup_divergence_proxy": res.evals["warmup_end"]["divergence_proxy"],
        "checkpoint": nn.checkpoint_hash(res.net),
    }


def run_seeds(config: RunConfig, task: SyntheticTaskSpec, seeds: Sequence[int],
              jobs: int = 1) -> List[Dict]:
    """Train once per seed; the seed drives both data generation and training."""
    work = [(replace(config, seed=s), task_for_seed(task, s)) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_run_one, work))
    return [_run_one(w) for w in work]


@dataclass
class ExperimentRow:
    name: str
    runs: List[Dict]
    key: str = "target_accuracy"
    flag: str = ""

    @property
    def values(self) -> np.ndarray:
        return np.array([r[self.key] for r in self.runs])

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


def format_table(rows: Sequence[ExperimentRow], title: str, scale: float = 100.0) -> str:
    width = max(len(r.name) for r in rows)
    unit = "%" if scale == 100.0 else ""
    lines = [title]
    for r in rows:
        per_seed = " ".join(f"{scale * v:7.2f}" for v in r.values)
        lines.append(
            f"  {r.name:<{width}}  {scale * r.mean:7.2f}{unit} +- {scale * r.std:5.2f}   [{per_seed}] {r.flag}".rstrip()
        )
    return "\n".join(lines)


def ablate(config: RunConfig, task: SyntheticTaskSpec, seeds: Sequence[int] = DEFAULT_SEEDS,
           variants=ABLATION_VARIANTS, jobs: int = 1) -> List[ExperimentRow]:
    rows = []
    for name, (k, t, c) in variants:
        cfg = replace(config, use_K=k, use_T=t, use_C=c)
        rows.append(ExperimentRow(name, run_seeds(cfg, task, seeds, jobs)))
    return rows


def sweep(param: str, grid: Optional[Iterable], config: RunConfig, task: SyntheticTaskSpec,
          seeds: Sequence[int] = DEFAULT_SEEDS, jobs: int = 1) -> List[ExperimentRow]:
    """Final divergence proxy per grid value; the argmin row is flagged."""
    if grid is None:
        grid = SWEEP_GRIDS[param]
    rows = []
    for value in grid:
        if param == "T":
            cfg = replace(config, T=int(value), schedule=None)
        else:
            cfg = replace(config, **{param: type(getattr(config, param))(value)})
        rows.append(ExperimentRow(f"{param}={value}", run_seeds(cfg, task, seeds, jobs),
                                  key="divergence_proxy"))
    best = int(np.argmin([r.mean for r in rows]))
    rows[best].flag = "<- min"
    return rows


def compare_losses(config: RunConfig, task: SyntheticTaskSpec,
                   seeds: Sequence[int] = DEFAULT_SEEDS, jobs: int = 1) -> List[ExperimentRow]:
    """Full method with the geodesic losses swapped for CORAL or linear MMD.

    A source-only reference row is appended after the three comparisons.
    """
    rows = []
    for name, disc in (("DSGK", "sphere"), ("CORAL", "coral"), ("MMD", "mmd")):
        rows.append(ExperimentRow(name, run_seeds(replace(config, discrepancy=disc), task, seeds, jobs)))
    base = replace(config, use_K=False, use_T=False, use_C=False)
    rows.append(ExperimentRow("source-only", run_seeds(base, task, seeds, jobs)))
    return rows
