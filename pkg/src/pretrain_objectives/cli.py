"""Command-line pipeline: build-vocab, embed, cluster, pretrain, eval, flops.

Every command reads one flat JSON config (``--config``), applies
``--override key=value`` pairs on top, and writes its artifacts to the paths
named in the config. Errors go to stderr as a single JSON line.

Exit codes: 0 ok, 1 invalid config or input, 2 missing upstream artifact,
3 training diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import costs
from .clustering import Clustering, kmeans
from .corpus import Vocabulary, build_vocab, ingest_corpus, iter_lines
from .embeddings import EmbeddingTable, train_word2vec
from .model import ModelConfig, canonical_json
from .objectives import CorruptionConfig, Objective
from .synthetic import bundled_corpus_path
from .trainer import (TrainConfig, TrainingDiverged, evaluate, feedback_sidecar,
                      load_training_checkpoint, pretrain, save_training_checkpoint, split_heldout)

logger = logging.getLogger(__name__)

COMMANDS = ("build-vocab", "embed", "cluster", "pretrain", "eval", "flops")
EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 1, 2, 3


class ConfigError(ValueError):
    pass


class MissingArtifact(RuntimeError):
    def __init__(self, stage: str, path):
        super().__init__(f"missing {stage} artifact at {path}")
        self.stage = stage
        self.path = str(path)


@dataclass
class PipelineConfig:
    # paths; an empty corpus list means the bundled synthetic corpus
    corpus: list = field(default_factory=list)
    vocab_path: str = "artifacts/vocab.txt"
    embeddings_path: str = "artifacts/embeddings.bin"
    clustering_path: str = "artifacts/clustering.txt"
    checkpoint_path: str = "artifacts/model.ckpt"
    metrics_path: str = "artifacts/metrics.jsonl"
    # vocabulary and encoding
    vocab_max_size: int = 2000
    min_freq: int = 1
    max_len: int = 64
    # word2vec
    w2v_window: int = 2
    w2v_dim: int = 300
    w2v_epochs: int = 20
    w2v_lr: float = 0.025
    w2v_negatives: int = 5
    # k-means
    n_clusters: int = 100
    kmeans_restarts: int = 20
    kmeans_max_iter: int = 300
    kmeans_tol: float = 1e-4
    # corruption
    objective: str = "CRTS"
    selection_rate: float = 0.15
    gamma: float = 2.0
    mlm_bert_split: bool = False
    hardness_orientation: str = "complement"
    # model
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    # training
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    eval_every: int = 200
    feedback_update_every: int = 1
    eval_rounds: int = 8
    heldout_every: int = 50
    resume: bool = False
    stop_at: int | None = None
    # cost report: "desk" uses the model keys above, "base"/"small" the reference configs
    flops_preset: str = "base"
    flops_vocab_size: int = 30522
    # common
    seed: int = 0
    workers: int = 1

    def corpus_paths(self) -> list[Path]:
        return [Path(p) for p in self.corpus] or [Path(str(bundled_corpus_path()))]

    def corruption(self) -> CorruptionConfig:
        return CorruptionConfig(kind=self.objective, selection_rate=self.selection_rate,
                                gamma=self.gamma, mlm_bert_split=self.mlm_bert_split,
                                hardness_orientation=self.hardness_orientation)

    def model(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(layers=self.layers, hidden=self.hidden, heads=self.heads,
                           ffn_dim=self.ffn_dim, vocab_size=vocab_size, max_len=self.max_len,
                           dropout=self.dropout)

    def train(self, vocab_size: int) -> TrainConfig:
        return TrainConfig(objective=self.corruption(), model=self.model(vocab_size),
                           steps=self.steps, batch_size=self.batch_size, peak_lr=self.peak_lr,
                           warmup_steps=self.warmup_steps, weight_decay=self.weight_decay,
                           seed=self.seed, eval_every=self.eval_every,
                           feedback_update_every=self.feedback_update_every,
                           eval_rounds=self.eval_rounds, heldout_every=self.heldout_every)


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _coerce(key: str, value):
    default = getattr(PipelineConfig(), key)
    if key == "stop_at":
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{key} must be an integer or null")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, str):
            return [value]
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return value
    raise ConfigError(f"bad value for {key}: {value!r}")


def _parse_override(item: str) -> tuple[str, object]:
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=(), seed=None, workers=None) -> PipelineConfig:
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config must be a JSON object")
    values = dict(values)
    for item in overrides:
        k, v = _parse_override(item)
        values[k] = v
    if seed is not None:
        values["seed"] = seed
    if workers is not None:
        values["workers"] = workers
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = PipelineConfig(**{k: _coerce(k, v) for k, v in values.items()})
    try:
        Objective(cfg.objective)
    except ValueError:
        raise ConfigError(f"unknown objective {cfg.objective!r}") from None
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.flops_preset not in ("desk", "base", "small"):
        raise ConfigError("flops_preset must be desk, base or small")
    return cfg


def _require(stage: str, path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(stage, path)
    return path


def _out(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _corpus(cfg: PipelineConfig) -> list[Path]:
    paths = cfg.corpus_paths()
    for p in paths:
        _require("corpus", p)
    return paths


def _vocab(cfg: PipelineConfig) -> Vocabulary:
    return Vocabulary.load(_require("vocab", cfg.vocab_path))


# -- commands --------------------------------------------------------------

def cmd_build_vocab(cfg: PipelineConfig) -> dict:
    vocab = build_vocab(iter_lines(_corpus(cfg)), cfg.vocab_max_size, cfg.min_freq)
    vocab.require_regular()
    vocab.save(_out(cfg.vocab_path))
    return {"vocab_size": vocab.size, "path": cfg.vocab_path}


def cmd_embed(cfg: PipelineConfig) -> dict:
    vocab = _vocab(cfg)
    seqs = ingest_corpus(_corpus(cfg), vocab, cfg.max_len)
    table = train_word2vec(seqs, vocab, window=cfg.w2v_window, dim=cfg.w2v_dim,
                           epochs=cfg.w2v_epochs, lr=cfg.w2v_lr, negatives=cfg.w2v_negatives,
                           seed=cfg.seed)
    table.save(_out(cfg.embeddings_path))
    return {"rows": len(table), "dim": table.dim, "epoch_losses": table.epoch_losses,
            "path": cfg.embeddings_path}


def cmd_cluster(cfg: PipelineConfig) -> dict:
    vocab = _vocab(cfg)
    table = EmbeddingTable.load(_require("embeddings", cfg.embeddings_path))
    cl = kmeans(table, vocab, n=cfg.n_clusters, restarts=cfg.kmeans_restarts,
                max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol, seed=cfg.seed,
                workers=cfg.workers)
    cl.save(_out(cfg.clustering_path))
    return {"n_clusters": cl.n, "inertia": min(cl.restart_inertias), "path": cfg.clustering_path}


def _load_clustering(cfg: PipelineConfig, vocab: Vocabulary) -> Clustering:
    # the clustering is the stage C-RTS cannot run without, so report it first
    cl_path = _require("clustering", cfg.clustering_path)
    table = EmbeddingTable.load(_require("embeddings", cfg.embeddings_path))
    cl = Clustering.load(cl_path, table)
    if cl.vocab_size != vocab.size:
        raise ConfigError("clustering does not match the vocabulary; rerun cluster")
    return cl


def cmd_pretrain(cfg: PipelineConfig) -> dict:
    vocab = _vocab(cfg)
    is_crts = Objective(cfg.objective) is Objective.CRTS
    clustering = _load_clustering(cfg, vocab) if is_crts else None
    corpus = list(ingest_corpus(_corpus(cfg), vocab, cfg.max_len))
    tcfg = cfg.train(vocab.size)
    ckpt = Path(cfg.checkpoint_path)
    state = None
    if cfg.resume and ckpt.exists():
        saved_cfg, state = load_training_checkpoint(ckpt)
        if saved_cfg != tcfg:
            raise ConfigError("checkpoint was written with a different training config")
    metrics_path = _out(cfg.metrics_path)
    _out(ckpt)
    mode = "a" if state is not None else "w"
    with open(metrics_path, mode, encoding="utf-8") as fh:
        def write(rec):
            fh.write(rec.to_json() + "\n")
            fh.flush()

        res = pretrain(corpus, vocab, tcfg, clustering=clustering, state=state,
                       stop_at=cfg.stop_at, on_metrics=write, checkpoint_path=ckpt)
    last = res.metrics[-1] if res.metrics else None
    return {"step": res.state.step, "checkpoint": str(ckpt),
            "metrics": str(metrics_path), "last": asdict(last) if last else None}


def cmd_eval(cfg: PipelineConfig) -> dict:
    vocab = _vocab(cfg)
    tcfg, state = load_training_checkpoint(_require("checkpoint", cfg.checkpoint_path))
    if tcfg.model.vocab_size != vocab.size:
        raise ConfigError("checkpoint does not match the vocabulary")
    clustering = None
    if tcfg.objective.kind is Objective.CRTS:
        _require("feedback", feedback_sidecar(cfg.checkpoint_path))
        clustering = _load_clustering(cfg, vocab)
    corpus = list(ingest_corpus(_corpus(cfg), vocab, tcfg.model.max_len))
    _, heldout = split_heldout(corpus, tcfg.heldout_every)
    rec = evaluate(state, heldout, vocab, tcfg, clustering)
    return asdict(rec)


def cmd_flops(cfg: PipelineConfig) -> dict:
    if cfg.flops_preset == "base":
        model = costs.base_like_config(cfg.flops_vocab_size)
        sched = costs.BASE_SCHEDULE
    elif cfg.flops_preset == "small":
        model = costs.small_like_config(cfg.flops_vocab_size)
        sched = costs.SMALL_SCHEDULE
    else:
        vocab_size = _vocab(cfg).size if Path(cfg.vocab_path).exists() else cfg.vocab_max_size
        model = cfg.model(vocab_size)
        sched = dict(bs=cfg.batch_size, phases=[(cfg.steps, cfg.max_len)])
    steps = sum(n for n, _ in sched["phases"])
    report = costs.model_cost(model, cfg.objective, sched["bs"], steps, sched["phases"])
    return report.to_dict()


HANDLERS = {
    "build-vocab": cmd_build_vocab,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "flops": cmd_flops,
}


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(canonical_json({"error": kind, "message": message, **extra}) + "\n")
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pretrain-objectives",
                                 description="MLM / RTS / C-RTS / SLM pre-training pipeline")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                    help="config override, may be repeated")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(command: str, config_path=None, overrides=(), seed=None, workers=None) -> int:
    try:
        cfg = load_config(config_path, overrides, seed, workers)
        result = HANDLERS[command](cfg)
    except MissingArtifact as exc:
        return _fail(EXIT_MISSING, "missing_artifact", str(exc), stage=exc.stage, path=exc.path)
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, "diverged", f"training diverged at step {exc.step}",
                     step=exc.step)
    except (ValueError, OSError) as exc:
        # ConfigError and every module's validation error are ValueErrors
        return _fail(EXIT_CONFIG, "invalid", str(exc))
    sys.stdout.write(canonical_json(result) + "\n")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.override, args.seed, args.workers)


if __name__ == "__main__":
    sys.exit(main())
