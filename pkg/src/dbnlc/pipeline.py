"""Experiment config and the staged pipeline behind the ``dbnlc`` CLI.

Every stage reads its inputs from, and writes its outputs to, the output
directory, so ``run`` is exactly the stage sequence and any stage's inputs can
be swapped by hand.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import core, evaluate, infer, params, preprocess, structure
from .core import RATINGS, NodeSpec

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    questionnaire: Path
    au_dir: Path
    out_dir: Path
    schema: list[NodeSpec] = field(default_factory=core.paper_schema)
    impute_k: int = 2
    gmm_k_min: int = 2
    gmm_k_max: int = 20
    gmm_restarts: int = 10
    # fix the AU cluster count instead of picking the BIC minimizer
    gmm_k: int | None = None
    alpha: float = 0.05
    max_cond: int = 3
    ess: float = 1.0
    em_tol: float = 1e-6
    em_max_iter: int = 20
    seed: int = 0
    train_weeks: tuple[int, int] = (1, 3)
    forecast_weeks: tuple[int, int] = (4, 5)
    exogenous: tuple[str, ...] = core.PERSONALITY
    self_parent_only: tuple[str, ...] = ("WB",)
    targets: tuple[str, ...] = RATINGS
    profiles: dict[str, dict[str, float]] = field(default_factory=dict)
    profile_horizon: int = 5
    workers: int = 1

    def validate(self) -> None:
        t0, t1 = self.train_weeks
        f0, f1 = self.forecast_weeks
        if t0 != 1:
            raise ConfigError("training weeks must start at week 1")
        if t1 - t0 + 1 < 2:
            raise ConfigError("training needs at least two weeks")
        if f0 > f1:
            raise ConfigError("forecast weeks are reversed")
        if f0 <= t1:
            raise ConfigError("forecast weeks must come after the training weeks")
        if self.impute_k < 1:
            raise ConfigError("impute_k must be >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.ess <= 0:
            raise ConfigError("ess must be positive")
        if self.gmm_k_min < 1 or self.gmm_k_min > self.gmm_k_max:
            raise ConfigError("need 1 <= gmm_k_min <= gmm_k_max")
        names = [s.name for s in self.schema]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate node names in schema")
        for n in (*self.exogenous, *self.self_parent_only, *self.targets):
            if n not in names:
                raise ConfigError(f"unknown node {n!r}")
        for label, prof in self.profiles.items():
            for n in prof:
                if n not in names:
                    raise ConfigError(f"profile {label}: unknown node {n!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_file(cls, path: str | Path, out_dir: str | Path | None = None,
                  seed: int | None = None, workers: int | None = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        root = path.parent
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for req in ("questionnaire", "au_dir"):
            if req not in doc:
                raise ConfigError(f"config lacks {req!r}")
        kw = dict(doc)
        kw["questionnaire"] = root / doc["questionnaire"]
        kw["au_dir"] = root / doc["au_dir"]
        kw["out_dir"] = Path(out_dir) if out_dir is not None else root / doc.get("out_dir", "out")
        if "schema" in doc:
            kw["schema"] = [NodeSpec.from_dict(d) for d in doc["schema"]]
        for key in ("train_weeks", "forecast_weeks", "exogenous", "self_parent_only", "targets"):
            if key in doc:
                kw[key] = tuple(doc[key])
        if seed is not None:
            kw["seed"] = seed
        if workers is not None:
            kw["workers"] = workers
        try:
            cfg = cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = [s.to_dict() for s in self.schema]
        for k in ("questionnaire", "au_dir", "out_dir"):
            d[k] = str(d[k])
        return d


# file names inside the output directory
FILES = {
    "imputed": "imputed.csv",
    "au_states": "au_states.csv",
    "clusters": "clusters.json",
    "bic": "bic_aic.csv",
    "schema": "schema.json",
    "discrete": "discrete.csv",
    "qmap": "quantization.json",
    "structure": "structure.json",
    "model": "model.json",
    "forecast": "forecast.csv",
    "profiles": "profiles.csv",
    "report": "report.txt",
    "dot": "structure.dot",
    "within": "adjacency_within.csv",
    "between": "adjacency_between.csv",
}


class Stage:
    """Collects the files a stage writes so a failed run can remove them."""

    def __init__(self, cfg: ExperimentConfig, written: list[Path]):
        self.cfg = cfg
        self.written = written

    def path(self, key: str) -> Path:
        return self.cfg.out_dir / FILES[key]

    def out(self, key: str) -> Path:
        p = self.path(key)
        self.written.append(p)
        return p

    def need(self, key: str) -> Path:
        p = self.path(key)
        if not p.exists():
            raise FileNotFoundError(f"{p} not found; run the stage that produces it first")
        return p


def _questionnaire_schema(cfg):
    return [s for s in cfg.schema if s.sub_session is None]


def _load_schema(st: Stage) -> list[NodeSpec]:
    return [NodeSpec.from_dict(d) for d in json.loads(st.need("schema").read_text())]


def stage_impute(st: Stage) -> None:
    cfg = st.cfg
    raw = core.load_dataset(cfg.questionnaire, _questionnaire_schema(cfg))
    if raw.weeks < cfg.forecast_weeks[1]:
        raise core.DataError(f"data has {raw.weeks} weeks; forecasting needs week {cfg.forecast_weeks[1]}")
    core.save_dataset(preprocess.knn_impute(raw, cfg.impute_k), st.out("imputed"))


def stage_cluster(st: Stage) -> None:
    cfg = st.cfg
    imputed = core.load_dataset(st.need("imputed"), _questionnaire_schema(cfg))
    au_nodes = [s for s in cfg.schema if s.sub_session is not None]
    states = np.zeros((len(imputed.subjects), imputed.weeks, len(au_nodes)))
    curves, summary = [], {}
    for j, spec in enumerate(au_nodes):
        feats = preprocess.load_au_features(cfg.au_dir, imputed.subjects, imputed.weeks, spec.sub_session)
        feats = preprocess.knn_impute(feats, cfg.impute_k)
        x = feats.values.reshape(-1, feats.values.shape[2])
        if cfg.gmm_k is not None:
            model = preprocess.fit_gmm(x, cfg.gmm_k, seed=cfg.seed, restarts=cfg.gmm_restarts, workers=cfg.workers)
            chosen = cfg.gmm_k
        else:
            k_max = min(cfg.gmm_k_max, x.shape[0])
            sel = preprocess.select_k(x, cfg.gmm_k_min, k_max, seed=cfg.seed,
                                      restarts=cfg.gmm_restarts, workers=cfg.workers)
            curves.append((spec.sub_session, sel))
            model, chosen = sel.best_model, sel.best_k
        if chosen != spec.cardinality:
            log.warning("%s: %d clusters selected, schema says %d; using %d", spec.name, chosen, spec.cardinality, chosen)
        states[:, :, j] = preprocess.assign_states(model, x).reshape(len(imputed.subjects), imputed.weeks)
        summary[spec.name] = {
            "sub_session": spec.sub_session,
            "K": chosen,
            "seed": cfg.seed,
            "restart": model.restart,
            "loglik": model.loglik,
            "warnings": list(model.warnings),
        }
    data = core.make_dataset(imputed.subjects, [s.name for s in au_nodes], states)
    core.save_dataset(data, st.out("au_states"))
    preprocess.write_bic_curves(curves, st.out("bic"))
    st.out("clusters").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def stage_discretize(st: Stage) -> None:
    cfg = st.cfg
    clusters = json.loads(st.need("clusters").read_text())
    schema = list(cfg.schema)
    for name, info in clusters.items():
        schema = core.with_cardinality(schema, name, int(info["K"]))
    imputed = core.load_dataset(st.need("imputed"), _questionnaire_schema(cfg))
    au = core.load_dataset(st.need("au_states"), [s for s in schema if s.sub_session is not None])
    full = imputed.merge(au).select_variables([s.name for s in schema])
    _, qmap = core.quantize(full.select_weeks(*cfg.train_weeks), schema)
    discrete = core.apply_quantization(full, schema, qmap)
    core.save_dataset(discrete, st.out("discrete"))
    core.save_qmap(qmap, st.out("qmap"))
    st.out("schema").write_text(json.dumps([s.to_dict() for s in schema], indent=2) + "\n")


def _constraints(cfg, schema):
    return structure.ConstraintSet.two_slice(schema, cfg.exogenous, cfg.self_parent_only)


def _training_rows(st: Stage, schema) -> core.TwoSliceDataset:
    discrete = _discrete_schema_dataset(st, schema)
    return core.unroll_two_slice(discrete, schema, st.cfg.train_weeks[1])


def _discrete_schema_dataset(st, schema):
    disc_spec = [NodeSpec(s.name, s.layer, s.cardinality, core.Kind.DISCRETE, s.static, s.sub_session) for s in schema]
    return core.load_dataset(st.need("discrete"), disc_spec)


def stage_learn(st: Stage) -> None:
    cfg = st.cfg
    schema = _load_schema(st)
    rows = _training_rows(st, schema)
    dag = structure.learn_structure(rows, _constraints(cfg, schema), cfg.alpha, cfg.max_cond, cfg.ess)
    doc = structure.dag_to_dict(dag)
    doc["training_rows"] = rows.n_rows
    st.out("structure").write_text(json.dumps(doc, indent=2) + "\n")


def stage_fit(st: Stage) -> None:
    cfg = st.cfg
    schema = _load_schema(st)
    rows = _training_rows(st, schema)
    dag = structure.dag_from_dict(json.loads(st.need("structure").read_text()))
    cpts = params.fit_map(rows, dag, cfg.ess)
    params.save_model(dag, cpts, st.out("model"), extra={"ess": cfg.ess, "training_rows": rows.n_rows})


def stage_forecast(st: Stage) -> None:
    cfg = st.cfg
    schema = _load_schema(st)
    dag, cpts, _ = params.load_model(st.need("model"))
    qmap = core.load_qmap(st.need("qmap"))
    discrete = _discrete_schema_dataset(st, schema)
    train = core.unroll_two_slice(discrete, schema, cfg.train_weeks[1])
    raw = core.load_dataset(cfg.questionnaire, _questionnaire_schema(cfg))
    base = [s.name for s in schema]
    targets = list(cfg.targets)

    jobs, keys, actuals = [], [], {}
    for s, subj in enumerate(discrete.subjects):
        for week in range(cfg.forecast_weeks[0], cfg.forecast_weeks[1] + 1):
            prev = {b: int(discrete.values[s, week - 2, v]) - 1 for v, b in enumerate(base)}
            curr = {b: int(discrete.values[s, week - 1, v]) - 1 for v, b in enumerate(base) if b not in targets}
            jobs.append(dict(dag=dag, cpts=cpts, prev_slice=prev, curr_partial=curr, qmap=qmap,
                             targets=targets, train=train, ess=cfg.ess,
                             em_max_iter=cfg.em_max_iter, em_tol=cfg.em_tol))
            keys.append((subj, week))
            if week <= raw.weeks and subj in raw.subjects:
                act = [raw.get(subj, week, t) for t in targets]
                if not all(a is None for a in act):
                    actuals[(subj, week)] = act
    results = infer.forecast_many(jobs, cfg.workers)
    preds = {k: [r.predictions[t] for t in targets] for k, r in zip(keys, results)}
    report = evaluate.build_report(preds, actuals, targets)
    evaluate.write_report_csv(report, st.out("forecast"))

    if cfg.profiles:
        with st.out("profiles").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["profile", "t", *targets])
            for label in sorted(cfg.profiles):
                traj = infer.forecast_profile(dag, cpts, cfg.profiles[label], cfg.profile_horizon, qmap, targets)
                for t, step in enumerate(traj.steps, start=1):
                    w.writerow([label, t, *(f"{step[x]:.6f}" for x in targets)])


def stage_evaluate(st: Stage) -> None:
    report = evaluate.read_report_csv(st.need("forecast"))
    st.out("report").write_text(evaluate.format_table(report))


def stage_export(st: Stage) -> None:
    dag = structure.dag_from_dict(json.loads(st.need("structure").read_text()))
    st.out("dot").write_text(structure.export_dot(dag))
    structure.write_adjacency(dag.within_adjacency(), dag.base, st.out("within"))
    structure.write_adjacency(dag.between_adjacency(), dag.base, st.out("between"))


STAGES: dict[str, Callable[[Stage], None]] = {
    "impute": stage_impute,
    "cluster": stage_cluster,
    "discretize": stage_discretize,
    "learn": stage_learn,
    "fit": stage_fit,
    "forecast": stage_forecast,
    "evaluate": stage_evaluate,
    "export": stage_export,
}


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_stage(cfg: ExperimentConfig, name: str, written: list[Path] | None = None) -> list[Path]:
    written = [] if written is None else written
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    st = Stage(cfg, written)
    log.info("stage %s", name)
    try:
        STAGES[name](st)
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - every failure is reported with its stage
        raise StageError(name, e) from e
    return written


def run_pipeline(cfg: ExperimentConfig) -> dict:
    """All stages in order; writes ``manifest.json`` listing every artifact and
    its SHA-256. On failure the files written so far are removed."""
    cfg.validate()
    written: list[Path] = []
    try:
        for name in STAGES:
            run_stage(cfg, name, written)
    except StageError:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    artifacts = sorted({p.name for p in written})
    manifest = {
        "seed": cfg.seed,
        "artifacts": {name: sha256(cfg.out_dir / name) for name in artifacts},
    }
    (cfg.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
