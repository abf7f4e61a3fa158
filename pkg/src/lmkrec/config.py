"""Flat ``key = value`` pipeline configuration with typed overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ParamError
from .postprocess import PostprocessParams
from .recognition import FusionParams
from .rerank import TreeHyper

LIST_KEYS = ("queries", "index", "nonlandmark", "weights")


@dataclass
class PipelineConfig:
    queries: list = field(default_factory=list)
    index: list = field(default_factory=list)
    nonlandmark: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    classifier_probs: str = ""
    truth: str = ""
    out_dir: str = "run_out"

    k_search: int = 100
    k_agg: int = 3
    alpha: float = 0.5

    rule1: bool = True
    rule2: bool = True
    tau: float = 0.3
    topk_nl: int = 3
    cap: int = 20
    penalty_mode: str = "subtract"
    nl_stat: str = "mean"

    rerank: bool = False
    rerank_model: str = ""
    rerank_train_fraction: float = 0.5
    n_trees: int = 100
    depth: int = 3
    shrinkage: float = 0.1
    min_leaf: int = 5

    seed: int = 0
    workers: int = 1
    write_neighbors: bool = True
    abstain_as_empty: bool = True

    def fusion(self) -> FusionParams:
        return FusionParams(k_agg=self.k_agg, alpha=self.alpha)

    def postprocess(self) -> PostprocessParams:
        return PostprocessParams(tau=self.tau, topk_nl=self.topk_nl, cap=self.cap,
                                 penalty_mode=self.penalty_mode, nl_stat=self.nl_stat)

    def tree_hyper(self) -> TreeHyper:
        return TreeHyper(n_trees=self.n_trees, depth=self.depth,
                         shrinkage=self.shrinkage, min_leaf=self.min_leaf)

    def feature_weights(self) -> list:
        if not self.weights:
            return [1.0] * len(self.queries)
        if len(self.weights) != len(self.queries):
            raise ParamError(f"{len(self.weights)} weights for {len(self.queries)} feature sets")
        return [float(w) for w in self.weights]

    def validate(self) -> None:
        if not self.queries or not self.index:
            raise ParamError("config needs at least one queries and one index path")
        if len(self.queries) != len(self.index):
            raise ParamError("queries and index must list the same number of feature sets")
        if self.nonlandmark and len(self.nonlandmark) != len(self.queries):
            raise ParamError("nonlandmark must list one path per feature set")
        if (self.rule1 or self.rerank) and not self.nonlandmark:
            raise ParamError("rule1 and rerank need a nonlandmark set")
        if self.rerank and not (self.rerank_model or self.truth):
            raise ParamError("rerank needs either rerank_model or truth for training")
        if self.k_search < 1 or self.workers < 1:
            raise ParamError("k_search and workers must be >= 1")
        if not 0.0 < self.rerank_train_fraction < 1.0:
            raise ParamError("rerank_train_fraction must lie in (0, 1)")
        self.feature_weights()
        self.fusion()
        self.postprocess()
        self.tree_hyper()


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ParamError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    raw = raw.strip()
    if key in LIST_KEYS:
        return [item.strip() for item in raw.split(",") if item.strip()]
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ParamError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ParamError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParamError(f"config line {lineno}: expected key = value")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        values[key] = _coerce(key, raw)
    return values


def parse_overrides(pairs) -> dict:
    values = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ParamError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip().replace("-", "_")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides: Mapping = None) -> PipelineConfig:
    """Read a config file (optional) and apply overrides; overrides win."""
    values = {}
    if path:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    values.update(overrides or {})
    cfg = PipelineConfig(**values)
    cfg.validate()
    return cfg


# execution knobs that never change results; kept out of reports
EXECUTION_KEYS = ("out_dir", "workers")


def dump_config(cfg: PipelineConfig, skip=()) -> str:
    lines = []
    for name in _FIELDS:
        if name in skip:
            continue
        v = getattr(cfg, name)
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"
