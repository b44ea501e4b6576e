"""Canned experiments: gradient checks, the selection-bias comparison and the ablation grid.

Every claim runs over several seeds and asserts directions on the seed means.
A :class:`Runner` caches simulations and trained cells so claims that share a
configuration (the default ECM and ECMM runs, for instance) train it once.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cascade_sim import TAG_CLICK, TAG_EXPOSE, TAG_IMPLY, CascadeConfig, CascadeData, Simulation, simulate
from .config import ExperimentConfig
from .metrics import MetricsReport
from .models import MODEL_KINDS, build_model
from .numerics import RngStream, finite_diff_check
from .train import Checkpoint, evaluate, make_model, planned_steps, train_loop, write_report

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
CLAIMS = ("ssb", "rcs", "ablation")
GRADCHECK_TOL = 1e-4
GRAD_FLOOR = 1e-6

# (model, domain) cells of the selection-bias comparison
SSB_CELLS = (
    ("deep_baseline", "exposure_only"),
    ("deep_baseline", "entire_chain"),
    ("ecm", "entire_chain"),
    ("ecmm", "entire_chain"),
)

# label -> config overrides for the ablation grid
ABLATION_CELLS = (
    ("ecm", dict(model="ecm")),
    ("ecm_half", dict(model="ecm", features="half")),
    ("ecmm", dict(model="ecmm")),
    ("ecmm_half", dict(model="ecmm", features="half")),
    ("ecmm_wo_l0", dict(model="ecmm", l0_lambda=0.0)),
    ("ecmm_t4", dict(model="ecmm", towers=4)),
)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class ClaimResult:
    claim: str
    checks: list[Check]
    rows: list[tuple]
    reports: dict
    timings: list[tuple] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        write_report(path, self.rows, self.reports, columns=("cell", "seed", "head", "metric", "k", "value"))
        # wall-clock lives apart from the report so reports stay byte-deterministic
        with open(path.with_suffix(".timing.tsv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("cell\tseed\tseconds_per_epoch\n")
            for cell, seed, sec in self.timings:
                fh.write(f"{cell}\t{seed}\t{sec:.3f}\n")


# ---------------------------------------------------------------------------
# gradient checks


def gradcheck_batch(seed: int, n: int = 16) -> tuple[CascadeConfig, object]:
    """A small world and a batch of ``n`` records mixing all three domain tags."""
    cfg = CascadeConfig(n_users=50, n_items=400, n_train_requests=20, n_eval_requests=0, pool_size=100)
    data = simulate(seed, cfg).train_full
    rng = RngStream(seed, "gradcheck-batch").generator()
    per_tag = {TAG_CLICK: n // 4, TAG_EXPOSE: n // 4}
    per_tag[TAG_IMPLY] = n - sum(per_tag.values())
    picks = []
    for tag, k in per_tag.items():
        pool = np.flatnonzero(data.domain_tag == tag)
        if len(pool) < k:
            # not enough clicks in this tiny world: backfill from exposures
            pool = np.flatnonzero(data.y5 == 1) if tag != TAG_IMPLY else pool
        picks.append(rng.choice(pool, k, replace=False))
    return cfg, data.take(np.sort(np.concatenate(picks)))


def gradcheck(kind: str, seed: int = 0, coords_per_tensor: int = 6, **model_kw) -> float:
    """Max relative error between analytic and finite-difference gradients.

    Gate noise is frozen, and ECMM gets a large L0 weight so the penalty
    gradient is visible next to the data term.
    """
    cfg, batch = gradcheck_batch(seed)
    if kind == "ecmm":
        model_kw.setdefault("l0_lambda", 0.1)
    model = build_model(
        kind,
        cfg.vocab_sizes(),
        list(range(cfg.n_fields)),
        user_fields=cfg.user_fields(),
        item_fields=cfg.item_fields(),
        **model_kw,
    )
    params = model.init_params(RngStream(seed, f"gradcheck/{kind}").generator())
    noise = model.draw_noise(RngStream(seed, "gradcheck-noise").generator())
    _, grads = model.loss_and_grad(params, batch, noise)
    rng = RngStream(seed, "gradcheck-coords").generator()
    coords = {}
    for name in params:
        g = grads[name].reshape(-1)
        # below ~1e-6 the difference quotient's roundoff alone breaks the tolerance
        live = np.flatnonzero(np.abs(g) >= GRAD_FLOOR)
        dead = np.flatnonzero(g == 0)
        take = rng.choice(live, min(coords_per_tensor, len(live)), replace=False)
        # a couple of coordinates the batch never reaches must stay flat
        extra = rng.choice(dead, min(2, len(dead)), replace=False)
        coords[name] = np.unique(np.concatenate([take, extra]))
    return finite_diff_check(lambda p: model.loss(p, batch, noise), params, grads, coords=coords)


def gradcheck_all(seed: int = 0) -> dict[str, float]:
    out = {kind: gradcheck(kind, seed) for kind in MODEL_KINDS}
    out["ecmm_t4"] = gradcheck("ecmm", seed, towers=4)
    out["ecmm_routing_only"] = gradcheck("ecmm", seed, gate_placement="routing_only")
    return out


# ---------------------------------------------------------------------------
# cached runs


@dataclass
class Cell:
    cfg: ExperimentConfig
    report: MetricsReport
    checkpoint: Checkpoint


class Runner:
    """Simulates once per seed and trains each distinct configuration once."""

    def __init__(self, base: ExperimentConfig | None = None):
        self.base = (base or ExperimentConfig()).validate()
        self._sims: dict[int, Simulation] = {}
        self._cells: dict[ExperimentConfig, Cell] = {}

    def simulation(self, seed: int) -> Simulation:
        if seed not in self._sims:
            log.info("simulating seed %d", seed)
            sim = simulate(seed, self.base.cascade())
            # the unsampled chain is only needed for rate checks; drop it to bound memory
            self._sims[seed] = replace(sim, train_full=CascadeData.empty(self.base.n_fields))
        return self._sims[seed]

    def matched_steps(self, seed: int) -> int:
        """Step budget of the entire-chain run; exposure-only runs get the same count."""
        return planned_steps(self.base, len(self.simulation(seed).train))

    def cell(self, seed: int, **overrides) -> Cell:
        sim = self.simulation(seed)
        cfg = self.base.with_(seed=seed, steps=self.matched_steps(seed), **overrides).validate()
        if cfg not in self._cells:
            ckpt = train_loop(cfg, sim.train)
            rep = evaluate(make_model(cfg), ckpt.params, sim.eval, sim.world, cfg)
            log.info("%s seed %d: gauc %.4f", overrides, seed, rep.gauc)
            self._cells[cfg] = Cell(cfg, rep, ckpt)
        return self._cells[cfg]


def _mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def _collect(cells: dict[tuple[str, int], Cell]) -> tuple[list[tuple], dict, list[tuple]]:
    rows, reports, timings = [], {}, []
    labels = sorted({label for label, _ in cells}, key=[label for label, _ in cells].index)
    seeds = sorted({seed for _, seed in cells})
    for label in labels:
        per_seed = []
        for seed in seeds:
            c = cells[(label, seed)]
            per_seed.append(c.report.rows())
            rows += [(label, seed, c.cfg.head, m, k, v) for m, k, v in c.report.rows()]
            reports.setdefault(label, {})[str(seed)] = c.report.to_json()
            timings.append((label, seed, c.checkpoint.seconds_per_epoch))
        for i, (m, k, _) in enumerate(per_seed[0]):
            rows.append((label, "mean", cells[(label, seeds[0])].cfg.head, m, k, _mean(r[i][2] for r in per_seed)))
    return rows, reports, timings


def _metric(cells, label, seeds, fn) -> float:
    return _mean(fn(cells[(label, s)].report) for s in seeds)


# ---------------------------------------------------------------------------
# claims


def ssb_cells(runner: Runner, seeds) -> dict[tuple[str, int], Cell]:
    return {
        (f"{model}@{domain}", seed): runner.cell(seed, model=model, domain=domain)
        for model, domain in SSB_CELLS
        for seed in seeds
    }


def ssb_checks(cells, seeds) -> list[Check]:
    r10 = lambda rep: rep.recall["click"][10]  # noqa: E731
    exp_recall = _metric(cells, "deep_baseline@exposure_only", seeds, r10)
    ecm_recall = _metric(cells, "ecm@entire_chain", seeds, r10)
    rcs_exp = _metric(cells, "deep_baseline@exposure_only", seeds, lambda r: r.rcs[10])
    rcs_ent = _metric(cells, "deep_baseline@entire_chain", seeds, lambda r: r.rcs[10])
    gap_exp = _metric(cells, "deep_baseline@exposure_only", seeds, lambda r: r.bias_gap)
    gap_ecm = _metric(cells, "ecm@entire_chain", seeds, lambda r: r.bias_gap)
    gauc_ecm = _metric(cells, "ecm@entire_chain", seeds, lambda r: r.gauc)
    gauc_ecmm = _metric(cells, "ecmm@entire_chain", seeds, lambda r: r.gauc)
    return [
        Check(
            "recall10_click_entire_chain_ecm_vs_exposure_only",
            ecm_recall - exp_recall >= 0.05,
            f"ecm@entire_chain {ecm_recall:.4f} vs deep_baseline@exposure_only {exp_recall:.4f} (need +0.05)",
        ),
        Check("rcs10_entire_chain_vs_exposure_only", rcs_ent > rcs_exp, f"entire_chain {rcs_ent:.4f} vs exposure_only {rcs_exp:.4f}"),
        Check(
            "bias_gap_exposure_only_vs_entire_chain_ecm",
            gap_exp > gap_ecm,
            f"exposure_only {gap_exp:.4f} vs ecm@entire_chain {gap_ecm:.4f}",
        ),
        Check("gauc_ecmm_vs_ecm", gauc_ecmm >= gauc_ecm, f"ecmm {gauc_ecmm:.4f} vs ecm {gauc_ecm:.4f}"),
    ]


def reproduce_ssb(runner: Runner | None = None, seeds=DEFAULT_SEEDS) -> ClaimResult:
    runner = runner or Runner()
    cells = ssb_cells(runner, seeds)
    return ClaimResult("ssb", ssb_checks(cells, seeds), *_collect(cells))


def reproduce_rcs(runner: Runner | None = None, seeds=DEFAULT_SEEDS) -> ClaimResult:
    """RCS@K of one architecture trained on each domain, for every evaluation K."""
    runner = runner or Runner()
    cells = {(label, s): c for (label, s), c in ssb_cells(runner, seeds).items() if label.startswith("deep_baseline")}
    checks = []
    for k in runner.base.eval_ks:
        exp = _metric(cells, "deep_baseline@exposure_only", seeds, lambda r: r.rcs[k])
        ent = _metric(cells, "deep_baseline@entire_chain", seeds, lambda r: r.rcs[k])
        checks.append(Check(f"rcs{k}_entire_chain_vs_exposure_only", ent > exp, f"entire_chain {ent:.4f} vs exposure_only {exp:.4f}"))
    return ClaimResult("rcs", checks, *_collect(cells))


def l0_gate_check(cells, seeds) -> Check:
    """Expected active gates of ``ecmm`` (default lambda) against ``ecmm_wo_l0``."""
    act = lambda label: [cells[(label, s)].report.extra["expected_active_gates"] for s in seeds]  # noqa: E731
    with_l0, without = act("ecmm"), act("ecmm_wo_l0")
    return Check(
        "active_gates_l0_vs_no_l0",
        float(np.mean(with_l0)) < float(np.mean(without)),
        "lambda=1e-5 " + ",".join(f"{v:.4f}" for v in with_l0) + " vs lambda=0 " + ",".join(f"{v:.4f}" for v in without),
    )


def ablation_checks(cells, seeds) -> list[Check]:
    checks = [l0_gate_check(cells, seeds)]
    for model in ("ecm", "ecmm"):
        full = _metric(cells, model, seeds, lambda r: r.gauc)
        half = _metric(cells, f"{model}_half", seeds, lambda r: r.gauc)
        checks.append(Check(f"gauc_{model}_half_vs_all_features", half < full, f"half {half:.4f} vs all {full:.4f}"))
    t4 = _metric(cells, "ecmm_t4", seeds, lambda r: r.gauc)
    checks.append(Check("ecmm_t4_completes", not math.isnan(t4), f"gauc {t4:.4f}"))
    return checks


def reproduce_ablation(runner: Runner | None = None, seeds=DEFAULT_SEEDS) -> ClaimResult:
    runner = runner or Runner()
    cells = {(label, s): runner.cell(s, **kw) for label, kw in ABLATION_CELLS for s in seeds}
    return ClaimResult("ablation", ablation_checks(cells, seeds), *_collect(cells))


REPRODUCERS = {"ssb": reproduce_ssb, "rcs": reproduce_rcs, "ablation": reproduce_ablation}


def reproduce(claim: str, runner: Runner | None = None, seeds=DEFAULT_SEEDS) -> ClaimResult:
    if claim not in REPRODUCERS:
        raise ValueError(f"unknown claim {claim!r}; expected one of {CLAIMS}")
    t0 = time.perf_counter()
    result = REPRODUCERS[claim](runner, seeds)
    log.info("claim %s finished in %.0fs", claim, time.perf_counter() - t0)
    return result
