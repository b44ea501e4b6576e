"""Training loop, checkpoint files and evaluation of a trained model."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cascade_sim import CascadeData, World, subsample_domains
from .config import ExperimentConfig, dump_config, parse_config
from .metrics import MetricsReport, RankedList, auc, bias_gap, gauc, rcs_at_k, recall_at_k
from .models import Model, build_model
from .numerics import AdamState, ParameterSet, RngStream, TrainingError, adam_step

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "#ecpr-checkpoint v1"


def make_model(cfg: ExperimentConfig) -> Model:
    sim = cfg.cascade()
    return build_model(
        cfg.model,
        sim.vocab_sizes(),
        cfg.kept_fields(),
        user_fields=sim.user_fields(),
        item_fields=sim.item_fields(),
        towers=cfg.towers,
        hc=cfg.hard_concrete(),
        l0_lambda=cfg.l0_lambda,
        log_alpha_init=cfg.log_alpha_init,
        gate_placement=cfg.gate_placement,
    )


def init_params(model: Model, cfg: ExperimentConfig) -> ParameterSet:
    return model.init_params(RngStream(cfg.seed, f"init/{cfg.model}").generator())


def training_view(data: CascadeData, domain: str) -> CascadeData:
    if domain == "exposure_only":
        return data.take(data.deepest_stage >= 5)
    return data


def planned_steps(cfg: ExperimentConfig, n_records: int) -> int:
    if cfg.steps:
        return cfg.steps
    return cfg.epochs * math.ceil(n_records / cfg.batch_size)


@dataclass
class Checkpoint:
    model: str
    params: ParameterSet
    config: ExperimentConfig
    epoch_losses: list[float] = field(default_factory=list)
    seconds_per_epoch: float = 0.0


def train_loop(cfg: ExperimentConfig, dataset: CascadeData, out: str | Path | None = None) -> Checkpoint:
    """Seeded minibatch Adam; exposure_only keeps deepest_stage >= 5 records only."""
    model = make_model(cfg)
    params = init_params(model, cfg)
    data = training_view(dataset, cfg.domain)
    total = planned_steps(cfg, len(data)) if len(data) else 0
    state = AdamState(lr=cfg.learning_rate)
    losses: list[float] = []
    epoch_time: list[float] = []
    step = 0
    epoch = 0
    last_good = params.copy()
    while step < total:
        order = RngStream(cfg.seed, "shuffle", epoch).generator().permutation(len(data))
        t0 = time.perf_counter()
        acc, n_batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            if step >= total:
                break
            batch = data.take(order[start : start + cfg.batch_size])
            noise = model.draw_noise(RngStream(cfg.seed, "gate-noise", step).generator())
            loss, grads = model.loss_and_grad(params, batch, noise)
            if not math.isfinite(loss):
                ckpt = Checkpoint(cfg.model, last_good, cfg, losses)
                if out is not None:
                    save_checkpoint(out, ckpt)
                raise TrainingError(f"non-finite loss at step {step}; last good checkpoint kept")
            adam_step(params, grads, state)
            acc += loss
            n_batches += 1
            step += 1
        last_good = params.copy()
        epoch_time.append(time.perf_counter() - t0)
        losses.append(acc / max(n_batches, 1))
        log.info("%s/%s epoch %d loss %.6f", cfg.model, cfg.domain, epoch, losses[-1])
        epoch += 1
    ckpt = Checkpoint(cfg.model, params, cfg, losses, float(np.mean(epoch_time)) if epoch_time else 0.0)
    if out is not None:
        save_checkpoint(out, ckpt)
    return ckpt


# ---------------------------------------------------------------------------
# checkpoint files


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def checkpoint_text(ckpt: Checkpoint) -> str:
    lines = [f"{CHECKPOINT_MAGIC} model={ckpt.model}"]
    for name in ckpt.params:
        t = ckpt.params[name]
        lines.append(f"tensor {name} {t.shape[0]} {t.shape[1]}")
        lines.extend(" ".join(_fmt(x) for x in row) for row in t)
    lines.append("config")
    lines.extend(dump_config(ckpt.config).splitlines())
    return "\n".join(lines) + "\n"


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_text(checkpoint_text(ckpt), encoding="utf-8", newline="\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC + " model="):
        raise ValueError(f"{path}: not an ecpr checkpoint")
    kind = lines[0].split("model=", 1)[1].strip()
    params = ParameterSet()
    i = 1
    while i < len(lines) and lines[i].startswith("tensor "):
        _, name, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        block = lines[i + 1 : i + 1 + rows]
        arr = np.array([[float(x) for x in row.split()] for row in block], dtype=np.float64)
        params[name] = arr.reshape(rows, cols)
        i += 1 + rows
    if i >= len(lines) or lines[i] != "config":
        raise ValueError(f"{path}: missing config section")
    cfg = parse_config("\n".join(lines[i + 1 :]))
    if cfg.model != kind:
        raise ValueError(f"{path}: header model {kind!r} disagrees with config model {cfg.model!r}")
    return Checkpoint(kind, params, cfg)


# ---------------------------------------------------------------------------
# evaluation


def observed_view(data: CascadeData, cfg: ExperimentConfig, seed: int):
    """The evaluation records as the model's training procedure would observe them.

    Applies the training sampling rates, then the training-domain filter.
    Returns the subset and its inverse-rate weights.
    """
    sub = subsample_domains(data, cfg.rates, RngStream(seed, "observed-view").generator())
    sub = training_view(sub, cfg.domain)
    return sub, 1.0 / sub.weight


def evaluate(
    model: Model,
    params: ParameterSet,
    data: CascadeData,
    world: World,
    cfg: ExperimentConfig,
    head: str | None = None,
    ks=None,
) -> MetricsReport:
    head = head or cfg.head
    ks = tuple(ks or cfg.eval_ks)
    heads = model.predict(params, data.features)
    score = heads.select(head)
    exposed = data.y5 == 1
    a = auc(score[exposed], data.y6[exposed])
    g = gauc(score[exposed], data.y6[exposed], data.user_id[exposed])
    oracle = world.propensity(data.user_id, data.item_id)
    ranked = [
        RankedList.build(data.request_id[s.start], data.item_id[s], score[s], data.y5[s], data.y6[s], oracle[s])
        for s in data.request_slices()
    ]
    recall = {t: {k: recall_at_k(ranked, k, t) for k in ks} for t in ("exposure", "click")}
    rcs = {k: rcs_at_k(ranked, k) for k in ks}

    obs, w = observed_view(data, cfg, cfg.seed)
    click_obs = model.predict(params, obs.features).t1 if len(obs) else np.zeros(0)
    gap = bias_gap(click_obs, obs.y6, heads.t1, data.y6, w) if len(obs) else math.nan
    return MetricsReport(
        auc=a,
        gauc=g,
        recall=recall,
        rcs=rcs,
        bias_gap=gap,
        n_requests=len(ranked),
        n_records=len(data),
        n_exposed=int(exposed.sum()),
        n_clicked=int(data.y6.sum()),
        extra={"expected_active_gates": model.gates_l0(params)},
    )


REPORT_COLUMNS = ("model", "head", "metric", "k", "value")


def write_report(path: str | Path, rows: list[tuple], reports: dict, columns: tuple[str, ...] = REPORT_COLUMNS) -> None:
    """TSV with one row per (model, head, metric, K) plus a JSON twin.

    The last column of every row is the numeric value; ``columns`` names all of them.
    """
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            *keys, value = row
            fh.write("\t".join(str(k) for k in keys) + f"\t{_fmt(value)}\n")
    json_path = path.with_suffix(".json") if path.suffix != ".json" else path.with_suffix(".report.json")
    json_path.write_text(json.dumps(reports, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def report_rows(label: str, head: str, rep: MetricsReport) -> list[tuple]:
    return [(label, head, metric, k, value) for metric, k, value in rep.rows()]
