"""Joint training of encoder, recall head and rank head.

One training step: encode the batch, score all clusters, sample candidate
labels from the current scores (with positives injected), rank candidates,
and take one AdamW step on the sum of the recall and rank losses.  The
encoder receives gradient from both losses.  Static-sampling mode freezes
candidate sets built once from a model snapshot.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as t
from .checkpoint import load_checkpoint, save_checkpoint
from .cluster import ClusterMap, build_cluster_map, build_label_reps, cluster_targets
from .corpus import Batch, XmcDataset, batch_iter
from .encoder import EncoderConfig, encode, init_encoder_params
from .errors import ConfigError, ContractError, TrainingError
from .optim import OptimizerState, SwaState, adamw_step, clip_grads, is_decay_exempt, swa_update
from .rank import DiscriminatorParams, gather_embeddings, init_discriminator, rank_loss, rank_scores
from .recall import CandidateSet, GeneratorParams, init_generator, recall_loss, recall_scores, sample_candidates
from .tensor import Tensor

DEFAULT_EMBED_DIM = 256


@dataclass
class TrainConfig:
    preset: str | None = None
    epochs: int = 10
    batch_size: int = 16
    b_top: int | None = None  # resolved against the dataset when unset
    embed_dim: int | None = None  # falls back to DEFAULT_EMBED_DIM
    cluster_size: int = 8  # max labels per cluster (s)
    max_len: int = 128
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    dropout: float = 0.5
    sampling_mode: str = "dynamic"  # or "static"
    swa_start_epoch: int | None = None  # default: epochs // 2 + 1
    seed: int = 7
    # encoder dims are deliberately separate flags so a preset's training
    # regime can be reused unchanged at any encoder scale
    hidden: int = 64
    n_layers: int = 5
    n_heads: int = 4
    ff_dim: int = 128
    concat_layers: int = 5
    block_dropout: float = 0.1
    min_freq: int = 1
    grad_clip: float | None = 5.0
    decay_bias_norm: bool = False  # literal reading: decay biases/norm weights too
    bottleneck_act: str = "sigmoid"
    rank_target_invert: bool = False  # debug-only inverted rank targets

    def resolved_swa_start(self) -> int:
        return self.swa_start_epoch if self.swa_start_epoch is not None else self.epochs // 2 + 1

    def resolved_embed_dim(self) -> int:
        return self.embed_dim if self.embed_dim is not None else DEFAULT_EMBED_DIM


# Per-dataset training presets.  Datasets that skip clustering get
# cluster_size=1 (every label is its own cluster); embed_dim stays unset
# where the dataset regime does not pin it.
PRESETS: dict[str, dict] = {
    "eurlex-4k": dict(epochs=20, batch_size=16, max_len=512, cluster_size=1),
    "amazoncat-13k": dict(epochs=5, batch_size=16, max_len=512, cluster_size=1),
    "wiki10-31k": dict(epochs=30, batch_size=16, max_len=512, cluster_size=1),
    "wiki-500k": dict(epochs=10, batch_size=32, embed_dim=500, cluster_size=60, max_len=128),
    "amazon-670k": dict(epochs=15, batch_size=16, embed_dim=400, cluster_size=80, max_len=128),
    # desk-scale synthetic corpus (64 labels in 8 topics)
    "synth-64": dict(
        epochs=20,
        batch_size=16,
        b_top=3,
        embed_dim=128,
        cluster_size=8,
        max_len=16,
        learning_rate=2e-3,
        dropout=0.2,
        hidden=48,
        n_layers=5,
        n_heads=4,
        ff_dim=96,
    ),
}


def apply_preset(config: TrainConfig, preset: str) -> TrainConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choices: {sorted(PRESETS)}")
    return replace(config, preset=preset, **PRESETS[preset])


def config_from_dict(values: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**values)


def default_b_top(avg_positives: float, num_clusters: int) -> int:
    """Candidate volume heuristic: ceil(15 * avg positives), clamped to [5, K]."""
    raw = math.ceil(15.0 * max(avg_positives, 1.0))
    return max(min(raw, num_clusters), min(5, num_clusters))


@dataclass
class ModelBundle:
    """Everything trainable plus the state needed to keep training deterministic."""

    config: TrainConfig
    enc_config: EncoderConfig
    params: dict[str, Tensor]
    cluster_map: ClusterMap
    generator: GeneratorParams
    discriminator: DiscriminatorParams
    opt: OptimizerState
    swa: SwaState
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def num_labels(self) -> int:
        return self.discriminator.num_labels

    def swa_available(self) -> bool:
        return self.swa.count > 0

    def inference_params(self, use_swa: bool | None = None) -> "ModelBundle":
        """A read-only view for prediction; SWA weights when present unless forced off."""
        if use_swa is None:
            use_swa = self.swa_available()
        if not use_swa:
            return self
        if not self.swa_available():
            raise ContractError("SWA weights requested but none accumulated")
        params = {name: Tensor(self.swa.average[name]) for name in self.params}
        return _bundle_views(self.config, self.enc_config, params, self.cluster_map, self.opt, self.swa, self.epoch, self.rng)


def _bundle_views(config, enc_config, params, cmap, opt, swa, epoch, rng) -> ModelBundle:
    generator = GeneratorParams(params["generator.W_g"], params["generator.b_g"])
    discriminator = DiscriminatorParams(
        params["discriminator.E"], params["discriminator.W_h"], params["discriminator.b_h"]
    )
    return ModelBundle(config, enc_config, params, cmap, generator, discriminator, opt, swa, epoch, rng)


def init_bundle(config: TrainConfig, vocab_size: int, cluster_map: ClusterMap) -> ModelBundle:
    enc_config = EncoderConfig(
        vocab_size=vocab_size,
        hidden=config.hidden,
        n_layers=config.n_layers,
        n_heads=config.n_heads,
        ff_dim=config.ff_dim,
        max_positions=config.max_len,
        dropout=config.dropout,
        block_dropout=config.block_dropout,
        concat_layers=config.concat_layers,
    )
    rng = np.random.default_rng(config.seed)
    params = init_encoder_params(enc_config, rng)
    generator = init_generator(cluster_map.num_clusters, enc_config.rep_width, rng)
    params["generator.W_g"] = generator.weight
    params["generator.b_g"] = generator.bias
    discriminator = init_discriminator(
        cluster_map.num_labels, config.resolved_embed_dim(), enc_config.rep_width, rng
    )
    params["discriminator.E"] = discriminator.label_emb
    params["discriminator.W_h"] = discriminator.bottleneck_w
    params["discriminator.b_h"] = discriminator.bottleneck_b

    exempt = set() if config.decay_bias_norm else {n for n in params if is_decay_exempt(n)}
    opt = OptimizerState(
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
        decay_exempt=exempt,
    )
    swa = SwaState(start_epoch=config.resolved_swa_start())
    return _bundle_views(config, enc_config, params, cluster_map, opt, swa, 0, rng)


@dataclass
class StaticCandidateCache:
    """Frozen per-instance candidate sets, computed once from a model snapshot."""

    sets: list[CandidateSet]

    def for_batch(self, batch: Batch) -> list[CandidateSet]:
        return [self.sets[i] for i in batch.doc_indices]


def build_static_cache(dataset: XmcDataset, bundle: ModelBundle, config: TrainConfig) -> StaticCandidateCache:
    """Sample candidates for every training instance with the snapshot generator."""
    b_top = resolve_b_top(config, dataset, bundle.cluster_map)
    sets: list[CandidateSet] = [None] * len(dataset)  # type: ignore[list-item]
    for batch in batch_iter(dataset, max(config.batch_size, 32), seed=0, shuffle=False):
        rep = encode(batch.token_ids, batch.mask, bundle.enc_config, bundle.params, training=False, rng=bundle.rng)
        scores = recall_scores(rep, bundle.generator).data
        sampled = sample_candidates(scores, bundle.cluster_map, b_top, positives=batch.labels)
        for idx, cs in zip(batch.doc_indices, sampled):
            sets[idx] = cs
    if any(s is None for s in sets):
        raise ConfigError("static cache does not cover every training instance")
    return StaticCandidateCache(sets)


def resolve_b_top(config: TrainConfig, dataset: XmcDataset, cmap: ClusterMap) -> int:
    if config.b_top is not None:
        if not 1 <= config.b_top <= cmap.num_clusters:
            raise ConfigError(f"b_top={config.b_top} outside [1, {cmap.num_clusters}]")
        return config.b_top
    return default_b_top(dataset.avg_positives(), cmap.num_clusters)


def joint_losses(
    batch: Batch,
    bundle: ModelBundle,
    config: TrainConfig,
    candidates: list[CandidateSet] | None = None,
    b_top: int | None = None,
    training: bool = True,
):
    """Forward pass producing (total, loss_g, loss_d, candidates).

    When ``candidates`` is None they are sampled dynamically from this
    forward's recall scores (training-time positive injection included).
    """
    cmap = bundle.cluster_map
    rep = encode(batch.token_ids, batch.mask, bundle.enc_config, bundle.params, training, bundle.rng)
    scores = recall_scores(rep, bundle.generator)
    targets = np.stack([cluster_targets(labels, cmap) for labels in batch.labels])
    loss_g = recall_loss(scores, targets)

    if candidates is None:
        if b_top is None:
            raise ContractError("dynamic sampling requires b_top")
        candidates = sample_candidates(scores.data, cmap, b_top, positives=batch.labels)

    per_instance = []
    for i, cs in enumerate(candidates):
        gathered = gather_embeddings(bundle.discriminator.label_emb, cs)
        row = t.take(rep, i, axis=0)
        probs = rank_scores(row, gathered, bundle.discriminator, config.bottleneck_act)
        per_instance.append(rank_loss(probs, cs.is_positive, config.rank_target_invert))
    loss_d = t.scale(t.add_n(per_instance), 1.0 / len(candidates))
    total = t.add(loss_g, loss_d)
    return total, loss_g, loss_d, candidates


def train_step(
    batch: Batch,
    bundle: ModelBundle,
    config: TrainConfig,
    b_top: int,
    cache: StaticCandidateCache | None = None,
) -> tuple[float, float]:
    """One optimizer step on L = L_g + L_d; returns the two loss values."""
    for p in bundle.params.values():
        p.grad = None
    candidates = cache.for_batch(batch) if cache is not None else None
    with t.record() as tape:
        total, loss_g, loss_d, _ = joint_losses(
            batch, bundle, config, candidates=candidates, b_top=b_top, training=True
        )
        lg, ld = float(loss_g.data), float(loss_d.data)
        if not (np.isfinite(lg) and np.isfinite(ld)):
            raise TrainingError(
                f"non-finite loss at step {bundle.opt.step_count + 1}: "
                f"loss_g={lg} loss_d={ld} lr={config.learning_rate}"
            )
        tape.backward(total)
    if config.grad_clip is not None:
        clip_grads(bundle.params, config.grad_clip)
    adamw_step(bundle.params, bundle.opt)
    return lg, ld


def format_metrics(record: dict) -> str:
    parts = []
    for key, value in record.items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.6g}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


def train(
    dataset: XmcDataset,
    config: TrainConfig,
    cluster_map: ClusterMap | None = None,
    dev: XmcDataset | None = None,
    out_dir: str | Path | None = None,
    log=print,
):
    """Run the full training loop; returns (bundle, per-epoch metric records)."""
    if cluster_map is None:
        reps = build_label_reps(dataset)
        cluster_map = build_cluster_map(reps, config.cluster_size, config.seed)
    if cluster_map.num_labels != dataset.num_labels:
        raise ConfigError(
            f"cluster map covers {cluster_map.num_labels} labels, dataset has {dataset.num_labels}"
        )
    if dataset.vocab is None:
        raise ConfigError("training requires a tokenized dataset (vocab missing)")

    bundle = init_bundle(config, dataset.vocab.size, cluster_map)
    b_top = resolve_b_top(config, dataset, cluster_map)
    log(f"[train] K={cluster_map.num_clusters} labels={dataset.num_labels} b_top={b_top} "
        f"sampling={config.sampling_mode} rep_width={bundle.enc_config.rep_width}")

    cache = None
    if config.sampling_mode == "static":
        cache = build_static_cache(dataset, bundle, config)
        log(f"[train] static candidate cache built from the initialized snapshot "
            f"({len(cache.sets)} instances)")
    elif config.sampling_mode != "dynamic":
        raise ConfigError(f"sampling_mode must be dynamic|static, got {config.sampling_mode!r}")

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    metrics: list[dict] = []
    swa_start = config.resolved_swa_start()
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        sum_g = sum_d = 0.0
        steps = 0
        for batch in batch_iter(dataset, config.batch_size, seed=config.seed, epoch=epoch):
            lg, ld = train_step(batch, bundle, config, b_top, cache)
            sum_g += lg
            sum_d += ld
            steps += 1
        bundle.epoch = epoch
        if epoch >= swa_start:
            swa_update(bundle.swa, bundle.params)
        record = {
            "epoch": epoch,
            "loss_g": sum_g / max(steps, 1),
            "loss_d": sum_d / max(steps, 1),
        }
        if dev is not None:
            from .predict import evaluate  # deferred: predict imports trainer types

            report = evaluate(dev, [bundle], b_top=b_top, use_swa=False)
            record.update(
                p1=report.precision[1],
                p3=report.precision[3],
                p5=report.precision[5],
                cluster_recall=report.cluster_recall,
            )
        record["wall_ms"] = (time.perf_counter() - started) * 1000.0
        metrics.append(record)
        log("[epoch] " + format_metrics(record))
        if out_path is not None:
            save_checkpoint(out_path / f"epoch{epoch:03d}.ckpt", {n: p.data for n, p in bundle.params.items()})

    if out_path is not None:
        final = {n: p.data for n, p in bundle.params.items()}
        if bundle.swa_available():
            final.update({f"{n}.swa": a for n, a in bundle.swa.average.items()})
        save_checkpoint(out_path / "final.ckpt", final)
        with open(out_path / "metrics.log", "w", encoding="utf-8") as fh:
            for record in metrics:
                fh.write(format_metrics(record) + "\n")
    return bundle, metrics


def build_micro_problem(seed: int = 3, num_labels: int = 8, vocab_size: int = 50, n_docs: int = 6):
    """Tiny model + dataset for gradient-fidelity checks.

    Vocab 50, hidden 8, 2 layers / 2 heads, K=4 clusters over 8 labels,
    embed_dim 4, batch size 2.
    """
    from .corpus import Document, Vocab as _Vocab

    config = TrainConfig(
        epochs=1,
        batch_size=2,
        b_top=2,
        embed_dim=4,
        cluster_size=2,
        max_len=8,
        learning_rate=1e-3,
        dropout=0.5,
        hidden=8,
        n_layers=2,
        n_heads=2,
        ff_dim=16,
        seed=seed,
    )
    members = [np.array([2 * c, 2 * c + 1]) for c in range(num_labels // 2)]
    assign = np.repeat(np.arange(num_labels // 2), 2)
    cmap = ClusterMap(assign, members, s=2, seed=seed)
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n_docs):
        length = int(rng.integers(2, 6))
        tokens = [1] + rng.integers(3, vocab_size, size=length - 1).tolist()
        labels = tuple(
            sorted(rng.choice(num_labels, size=int(rng.integers(1, 3)), replace=False).tolist())
        )
        docs.append(Document(i, tokens, labels, None))
    vocab = _Vocab({f"tok{i}": 3 + i for i in range(vocab_size - 3)})
    dataset = XmcDataset(docs, num_labels=num_labels, feature_dim=10, vocab=vocab)
    bundle = init_bundle(config, vocab.size, cmap)
    return config, dataset, bundle


def micro_joint_grad_check(seed: int = 3, h: float = 1e-5) -> float:
    """Max relative gradient error of the joint loss on the micro model.

    Candidate sets are sampled once up front and then frozen (sampling is not
    differentiable); dropout stays active but is re-seeded identically on
    every finite-difference probe.
    """
    config, dataset, bundle = build_micro_problem(seed)
    batch = next(batch_iter(dataset, config.batch_size, seed=config.seed, epoch=1))
    _, _, _, candidates = joint_losses(batch, bundle, config, b_top=config.b_top, training=False)

    def forward():
        bundle.rng = np.random.default_rng(17)
        total, *_ = joint_losses(batch, bundle, config, candidates=candidates, training=True)
        return total

    return t.grad_check(forward, list(bundle.params.values()), h=h)


def load_bundle(ckpt_path: str | Path, config: TrainConfig, vocab_size: int, cluster_map: ClusterMap) -> ModelBundle:
    """Rebuild a bundle from a checkpoint (raw weights plus any SWA records)."""
    bundle = init_bundle(config, vocab_size, cluster_map)
    stored = load_checkpoint(ckpt_path)
    raw = {n: a for n, a in stored.items() if not n.endswith(".swa")}
    missing = set(bundle.params) - set(raw)
    if missing:
        raise ConfigError(f"checkpoint {ckpt_path} missing parameters: {sorted(missing)[:3]}...")
    for name, arr in raw.items():
        if name not in bundle.params:
            raise ConfigError(f"checkpoint {ckpt_path} has unexpected parameter {name}")
        if bundle.params[name].shape != arr.shape:
            raise ConfigError(
                f"checkpoint {ckpt_path}: shape mismatch for {name}: "
                f"{arr.shape} vs expected {bundle.params[name].shape}"
            )
        bundle.params[name].data = arr.astype(t.default_dtype())
    swa_records = {n[: -len(".swa")]: a for n, a in stored.items() if n.endswith(".swa")}
    if swa_records:
        if set(swa_records) != set(bundle.params):
            raise ConfigError(f"checkpoint {ckpt_path}: incomplete SWA record set")
        bundle.swa.average = {n: a.astype(t.default_dtype()) for n, a in swa_records.items()}
        bundle.swa.count = 1
    return bundle
