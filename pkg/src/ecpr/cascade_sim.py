"""Synthetic cascade (matching -> pre-ranking -> ranking -> exposure -> click).

A seeded world of user/item latent vectors defines a true click propensity.
Each request pushes a random candidate pool through four top-N selectors that
score items by a noisy, bid-biased proxy of true relevance, so the exposure
domain is a biased sample of the matching domain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields as dc_fields
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numerics import RngStream, sigmoid

N_ATTR_BUCKETS = 8
TAG_CLICK, TAG_EXPOSE, TAG_IMPLY = 1, 2, 3
DATASET_MAGIC = "#ecpr-dataset v1"


class ConfigError(ValueError):
    pass


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class CascadeConfig:
    n_users: int = 2000
    n_items: int = 10000
    latent_dim: int = 8
    n_fields: int = 12
    relevance_scale: float = 1.5
    relevance_bias: float = -4.5
    attr_noise: float = 0.5
    pool_size: int = 200
    stage_sizes: tuple[int, int, int, int] = (50, 20, 10, 5)
    # selectors for S2, S3, S4, S5 in that order
    stage_noise: tuple[float, float, float, float] = (1.0, 1.0, 0.7, 0.5)
    stage_bias: tuple[float, float, float, float] = (0.0, 1.0, 1.0, 0.5)
    n_train_requests: int = 50000
    n_eval_requests: int = 5000
    # keep-rates for t1, t2, S3-S5, S2-S3
    rates: tuple[float, float, float, float] = (1.0, 0.4, 0.05, 0.01)

    def validate(self) -> None:
        n2, n3, n4, n5 = self.stage_sizes
        if not (self.pool_size >= n2 >= n3 >= n4 >= n5 >= 1):
            raise ConfigError(f"need pool >= N2 >= N3 >= N4 >= N5 >= 1, got {self.pool_size}, {self.stage_sizes}")
        if self.pool_size > self.n_items:
            raise ConfigError(f"pool_size {self.pool_size} exceeds n_items {self.n_items}")
        if any(not (0.0 < r <= 1.0) for r in self.rates):
            raise ConfigError(f"sampling rates must lie in (0, 1], got {self.rates}")
        if self.n_fields < 4:
            raise ConfigError("n_fields must be at least 4")
        if min(self.n_users, self.n_items) < 1 or self.latent_dim < 0:
            raise ConfigError("world sizes must be positive")
        if len(self.stage_noise) != 4 or len(self.stage_bias) != 4:
            raise ConfigError("stage_noise and stage_bias need one value per selector (4)")

    @property
    def n_user_attrs(self) -> int:
        return (self.n_fields - 2) // 2

    @property
    def n_item_attrs(self) -> int:
        """Item-side fields excluding bid and cross."""
        return self.n_fields - 2 - self.n_user_attrs - 2

    def vocab_sizes(self) -> list[int]:
        return (
            [self.n_users, self.n_items]
            + [N_ATTR_BUCKETS] * self.n_user_attrs
            + [N_ATTR_BUCKETS] * self.n_item_attrs
            + [N_ATTR_BUCKETS, N_ATTR_BUCKETS * N_ATTR_BUCKETS]
        )

    def user_fields(self) -> list[int]:
        return [0] + list(range(2, 2 + self.n_user_attrs))

    def item_fields(self) -> list[int]:
        return [1] + list(range(2 + self.n_user_attrs, self.n_fields))


@dataclass
class World:
    user_vec: np.ndarray
    item_vec: np.ndarray
    item_bid: np.ndarray
    relevance_scale: float
    relevance_bias: float
    stage_noise: np.ndarray
    stage_bias: np.ndarray
    user_feats: np.ndarray
    item_feats: np.ndarray

    def logit(self, user: int, items: np.ndarray) -> np.ndarray:
        if self.user_vec.shape[1] == 0:
            return np.full(len(items), self.relevance_bias)
        return self.relevance_scale * (self.item_vec[items] @ self.user_vec[user]) + self.relevance_bias

    def propensity(self, user, items) -> np.ndarray:
        """True click propensity p*(u, i); ``user`` may be an array aligned with ``items``."""
        items = np.asarray(items)
        if np.ndim(user) == 0:
            return np.asarray(sigmoid(self.logit(int(user), items)))
        user = np.asarray(user)
        dots = np.einsum("ij,ij->i", self.user_vec[user], self.item_vec[items])
        return np.asarray(sigmoid(self.relevance_scale * dots + self.relevance_bias))


def _hash_bucket(ids: np.ndarray, n: int, salt: int) -> np.ndarray:
    h = (ids.astype(np.uint64) * np.uint64(0x9E3779B1) + np.uint64(salt)) % np.uint64(2**32)
    return (h % np.uint64(n)).astype(np.int64)


def _quantile_bucket(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) < 2:
        return np.zeros(len(x), dtype=np.int64)
    edges = np.quantile(x, np.linspace(0, 1, n + 1)[1:-1])
    return np.searchsorted(edges, x, side="right").astype(np.int64)


def generate_world(seed: int, cfg: CascadeConfig) -> World:
    cfg.validate()
    root = RngStream(seed, "world")
    d = cfg.latent_dim
    rng = root.child("latent").generator()
    scale = 1.0 / math.sqrt(d) if d else 0.0
    user_vec = rng.normal(0.0, 1.0, (cfg.n_users, d)) * math.sqrt(scale)
    item_vec = rng.normal(0.0, 1.0, (cfg.n_items, d)) * math.sqrt(scale)
    item_bid = root.child("bid").generator().normal(0.0, 1.0, cfg.n_items)

    rng = root.child("attrs").generator()
    # observable attributes are noisy projections of the latent vectors
    u_attr = np.empty((cfg.n_users, cfg.n_user_attrs), dtype=np.int64)
    for k in range(cfg.n_user_attrs):
        proj = rng.normal(0.0, 1.0, d)
        raw = user_vec @ proj + cfg.attr_noise * rng.normal(0.0, 1.0, cfg.n_users) * (1.0 if d else 0.0)
        u_attr[:, k] = _quantile_bucket(raw, N_ATTR_BUCKETS)
    i_attr = np.empty((cfg.n_items, cfg.n_item_attrs), dtype=np.int64)
    for k in range(cfg.n_item_attrs):
        proj = rng.normal(0.0, 1.0, d)
        raw = item_vec @ proj + cfg.attr_noise * rng.normal(0.0, 1.0, cfg.n_items) * (1.0 if d else 0.0)
        i_attr[:, k] = _quantile_bucket(raw, N_ATTR_BUCKETS)
    bid_bucket = _quantile_bucket(item_bid, N_ATTR_BUCKETS)

    user_feats = np.column_stack([_hash_bucket(np.arange(cfg.n_users), cfg.n_users, 17), u_attr])
    item_feats = np.column_stack(
        [_hash_bucket(np.arange(cfg.n_items), cfg.n_items, 29), i_attr, bid_bucket]
    )
    return World(
        user_vec=user_vec,
        item_vec=item_vec,
        item_bid=item_bid,
        relevance_scale=cfg.relevance_scale,
        relevance_bias=cfg.relevance_bias,
        stage_noise=np.asarray(cfg.stage_noise, dtype=np.float64),
        stage_bias=np.asarray(cfg.stage_bias, dtype=np.float64),
        user_feats=user_feats,
        item_feats=item_feats,
    )


@dataclass
class CascadeSample:
    request_id: int
    user_id: int
    item_id: int
    features: tuple[int, ...]
    deepest_stage: int
    y5: int
    y6: int
    domain_tag: int
    sample_rate_weight: float = 1.0


COLUMNS = ("request_id", "user_id", "item_id", "features", "deepest_stage", "y5", "y6", "domain_tag", "weight")


@dataclass
class CascadeData:
    """Columnar batch of cascade records."""

    request_id: np.ndarray
    user_id: np.ndarray
    item_id: np.ndarray
    features: np.ndarray
    deepest_stage: np.ndarray
    y5: np.ndarray
    y6: np.ndarray
    domain_tag: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.request_id)

    def take(self, idx) -> "CascadeData":
        return CascadeData(**{c: getattr(self, c)[idx] for c in COLUMNS})

    @classmethod
    def concat(cls, parts: Sequence["CascadeData"], n_fields: int) -> "CascadeData":
        if not parts:
            return cls.empty(n_fields)
        return cls(**{c: np.concatenate([getattr(p, c) for p in parts]) for c in COLUMNS})

    @classmethod
    def empty(cls, n_fields: int) -> "CascadeData":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, np.zeros((0, n_fields), np.int64), z, z, z, z, np.zeros(0))

    def records(self) -> Iterator[CascadeSample]:
        for k in range(len(self)):
            yield CascadeSample(
                int(self.request_id[k]),
                int(self.user_id[k]),
                int(self.item_id[k]),
                tuple(int(f) for f in self.features[k]),
                int(self.deepest_stage[k]),
                int(self.y5[k]),
                int(self.y6[k]),
                int(self.domain_tag[k]),
                float(self.weight[k]),
            )

    def request_slices(self) -> list[slice]:
        """Contiguous slices per request; records must be grouped by request."""
        if len(self) == 0:
            return []
        cuts = np.flatnonzero(np.diff(self.request_id)) + 1
        bounds = np.concatenate([[0], cuts, [len(self)]])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def record_features(world: World, cfg: CascadeConfig, user: int, items: np.ndarray) -> np.ndarray:
    uf = world.user_feats[user]
    itf = world.item_feats[items]
    cross = uf[1] * N_ATTR_BUCKETS + itf[:, -1] if cfg.n_user_attrs else itf[:, -1]
    n_ia = cfg.n_item_attrs
    # field order: user id, item id, user attrs, item attrs, bid, cross
    return np.column_stack(
        [
            np.full(len(items), uf[0]),
            itf[:, 0],
            np.tile(uf[1:], (len(items), 1)),
            itf[:, 1 : 1 + n_ia],
            itf[:, 1 + n_ia],
            cross,
        ]
    ).astype(np.int64)


def simulate_request(
    world: World, cfg: CascadeConfig, request_id: int, user: int, rng: np.random.Generator
) -> CascadeData:
    """Run one request through the cascade; emits one record per S2 member."""
    n2, n3, n4, n5 = cfg.stage_sizes
    if cfg.pool_size < n2 or cfg.pool_size > len(world.item_vec):
        raise ConfigError(f"candidate pool of {cfg.pool_size} cannot fill N2={n2}")
    pool = rng.choice(len(world.item_vec), size=cfg.pool_size, replace=False)
    logit = world.logit(user, pool)
    bid = world.item_bid[pool]
    members = np.arange(cfg.pool_size)
    depth = np.zeros(cfg.pool_size, dtype=np.int64)
    for stage, n_keep in enumerate((n2, n3, n4, n5)):
        noise = rng.normal(0.0, 1.0, len(members))
        score = logit[members] + world.stage_noise[stage] * noise + world.stage_bias[stage] * bid[members]
        # stable order: ties broken by pool position
        order = np.lexsort((members, -score))
        members = np.sort(members[order[:n_keep]])
        depth[members] = stage + 2
    s2 = np.flatnonzero(depth >= 2)
    items = pool[s2]
    stage_of = depth[s2]
    y5 = (stage_of >= 5).astype(np.int64)
    p_click = world.propensity(user, items)
    y6 = ((rng.random(len(items)) < p_click) & (y5 == 1)).astype(np.int64)
    order = np.argsort(items, kind="stable")
    items, stage_of, y5, y6 = items[order], stage_of[order], y5[order], y6[order]
    n = len(items)
    out = CascadeData(
        request_id=np.full(n, request_id, dtype=np.int64),
        user_id=np.full(n, user, dtype=np.int64),
        item_id=items.astype(np.int64),
        features=record_features(world, cfg, user, items),
        deepest_stage=stage_of,
        y5=y5,
        y6=y6,
        domain_tag=np.zeros(n, dtype=np.int64),
        weight=np.ones(n),
    )
    return label_domains(out)


def label_domains(data: CascadeData) -> CascadeData:
    if np.any((data.y6 == 1) & (data.y5 == 0)):
        raise LabelError("click without exposure (y6=1, y5=0)")
    if np.any((data.y5 == 1) != (data.deepest_stage >= 5)):
        raise LabelError("y5 disagrees with deepest_stage")
    tag = np.where(data.y6 == 1, TAG_CLICK, np.where(data.y5 == 1, TAG_EXPOSE, TAG_IMPLY))
    data.domain_tag = tag.astype(np.int64)
    return data


def keep_rates(data: CascadeData, rates: Sequence[float]) -> np.ndarray:
    r_click, r_expose, r_s3, r_s2 = rates
    return np.select(
        [data.domain_tag == TAG_CLICK, data.domain_tag == TAG_EXPOSE, data.deepest_stage >= 3],
        [r_click, r_expose, r_s3],
        default=r_s2,
    ).astype(np.float64)


def subsample_domains(data: CascadeData, rates: Sequence[float], rng: np.random.Generator) -> CascadeData:
    """Bernoulli keep per record at its domain rate; the rate is stored as weight."""
    rate = keep_rates(data, rates)
    keep = rng.random(len(data)) < rate
    out = data.take(keep)
    out.weight = rate[keep]
    return out


def request_users(seed: int, cfg: CascadeConfig, first: int, count: int) -> np.ndarray:
    rng = RngStream(seed, "users").generator()
    users = rng.integers(0, cfg.n_users, size=cfg.n_train_requests + cfg.n_eval_requests)
    return users[first : first + count]


def simulate_split(world: World, cfg: CascadeConfig, seed: int, first: int, count: int) -> CascadeData:
    users = request_users(seed, cfg, first, count)
    stream = RngStream(seed, "request")
    parts = [
        simulate_request(world, cfg, first + k, int(users[k]), stream.at(first + k).generator())
        for k in range(count)
    ]
    return CascadeData.concat(parts, cfg.n_fields)


@dataclass
class Simulation:
    world: World
    train_full: CascadeData
    train: CascadeData
    eval: CascadeData


def simulate(seed: int, cfg: CascadeConfig) -> Simulation:
    cfg.validate()
    world = generate_world(seed, cfg)
    train_full = simulate_split(world, cfg, seed, 0, cfg.n_train_requests)
    eval_split = simulate_split(world, cfg, seed, cfg.n_train_requests, cfg.n_eval_requests)
    train = subsample_domains(train_full, cfg.rates, RngStream(seed, "subsample").generator())
    return Simulation(world, train_full, train, eval_split)


@dataclass(frozen=True)
class RateCheck:
    n_matching: int
    n_exposure: int
    n_click: int
    etr: Fraction | None
    ctr: Fraction | None
    etctr: Fraction | None


def empirical_rate_check(data: CascadeData) -> RateCheck:
    """Count ratios ETR = S5/S2, CTR = S6/S5, ETCTR = S6/S2; ``None`` when undefined."""
    s2, s5, s6 = len(data), int(data.y5.sum()), int(data.y6.sum())
    etr = Fraction(s5, s2) if s2 else None
    ctr = Fraction(s6, s5) if s5 else None
    etctr = Fraction(s6, s2) if s2 else None
    if etr is not None and ctr is not None:
        assert etr * ctr == etctr
    return RateCheck(s2, s5, s6, etr, ctr, etctr)


def chi_square_shift(data: CascadeData, field_index: int, n_buckets: int) -> float:
    """Chi-square statistic of the exposure-domain histogram of one field against the matching-domain one."""
    full = np.bincount(data.features[:, field_index], minlength=n_buckets).astype(np.float64)
    exposed = np.bincount(data.features[data.y5 == 1, field_index], minlength=n_buckets).astype(np.float64)
    expected = full / full.sum() * exposed.sum()
    mask = expected > 0
    return float((((exposed - expected) ** 2)[mask] / expected[mask]).sum())


# ---------------------------------------------------------------------------
# dataset files


def write_dataset(path: Path | str, data: CascadeData, n_fields: int) -> None:
    lines = [f"{DATASET_MAGIC} fields={n_fields}\n"]
    for k in range(len(data)):
        feats = "\t".join(str(int(f)) for f in data.features[k])
        lines.append(
            f"{data.request_id[k]}\t{data.user_id[k]}\t{data.item_id[k]}\t{feats}\t"
            f"{data.deepest_stage[k]}\t{data.y5[k]}\t{data.y6[k]}\t{data.domain_tag[k]}\t"
            f"{float(data.weight[k])!r}\n"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def read_dataset(path: Path | str) -> CascadeData:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(DATASET_MAGIC + " fields="):
            raise ValueError(f"{path}: not an ecpr dataset (header {header!r})")
        n_fields = int(header.split("fields=")[1])
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    if not rows:
        return CascadeData.empty(n_fields)
    width = 3 + n_fields + 5
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: expected {width} columns per row")
    ints = np.array([r[:-1] for r in rows], dtype=np.int64)
    return CascadeData(
        request_id=ints[:, 0],
        user_id=ints[:, 1],
        item_id=ints[:, 2],
        features=ints[:, 3 : 3 + n_fields],
        deepest_stage=ints[:, 3 + n_fields],
        y5=ints[:, 4 + n_fields],
        y6=ints[:, 5 + n_fields],
        domain_tag=ints[:, 6 + n_fields],
        weight=np.array([float(r[-1]) for r in rows]),
    )


def config_fields() -> list[str]:
    return [f.name for f in dc_fields(CascadeConfig)]
