"""End-to-end runs driven by a :class:`~navit.config.RunConfig`: data streams, training, packing stats, evaluation."""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from .config import RunConfig, dump_config
from .cost import encoder_flops
from .encoder import AdamW, Schedule, init_params, load_checkpoint, save_checkpoint, train_step
from .errors import ConfigError, RangeError
from .imageset import aspect_stats, generate_synthetic, read_rawset
from .numerics.rng import make_rng, substream
from .numerics.tensor import precision
from .packing import fill_batch, grid_coords, layout, pack_first_fit, padding_stats, tokenize, tokenize_square
from .posemb import VARIANTS, eval_posemb, init_posemb
from .sampling import apply_token_drop, sample_effective_side

SCHEMA_VERSION = 1
CHECKPOINT = "checkpoint.nvck"
STATE = "train_state.json"


# -- data ---------------------------------------------------------------------


def load_images(config: RunConfig, split="train", pixels=True):
    """Training or held-out images; synthetic splits use disjoint id ranges."""
    ds = config.dataset
    if ds.path:
        try:
            images = read_rawset(ds.path)
        except OSError as exc:
            raise ConfigError(f"cannot read dataset: {exc}", "dataset.path") from None
        if ds.eval_count >= len(images):
            raise ConfigError(f"eval_count {ds.eval_count} leaves no training images", "dataset.eval_count")
        cut = len(images) - ds.eval_count
        return images[:cut] if split == "train" else images[cut:]
    count, first = (ds.count, 0) if split == "train" else (ds.eval_count, ds.count)
    return SyntheticImages(config, first, count, pixels)


class SyntheticImages(Sequence):
    """Synthetic split generated on first access; each image depends only on ``(seed, id)``."""

    def __init__(self, config: RunConfig, first_id, count, pixels=True):
        self.config, self.first_id, self.count, self.pixels = config, first_id, count, pixels
        self._cache = {}

    def __len__(self):
        return self.count

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(self.count))]
        if not -self.count <= index < self.count:
            raise IndexError(index)
        index %= self.count
        if index not in self._cache:
            ds = self.config.dataset
            self._cache[index] = generate_synthetic(
                1, ds.ratio_law, ds.area_law, self.config.seed, channels=ds.channels,
                num_classes=ds.num_classes, pixels=self.pixels, noise_std=ds.noise_std,
                amplitude=ds.amplitude, first_id=self.first_id + index)[0]
        return self._cache[index]


def navit_example(config: RunConfig, img, index, with_pixels=True):
    """Sampled-resolution, token-dropped example for position ``index`` of the training stream."""
    patch = config.packing.patch
    side = sample_effective_side(config.sampler, substream(config.seed, "side", index))
    ex = tokenize(img, side, patch, with_pixels)
    drop_rng = substream(config.seed, "drop", index)
    rate = config.drop.sample(drop_rng, seq_len=len(ex), images_seen=index)
    return apply_token_drop(ex, rate, drop_rng)


def navit_batch(config: RunConfig, images, cursor):
    """Next packed batch of the stream starting at ``cursor``; returns ``(batch, next_cursor)``."""
    pk = config.packing
    window = pk.batch_sequences * pk.max_examples
    candidates = [navit_example(config, images[(cursor + i) % len(images)], cursor + i)
                  for i in range(window)]
    batch, rest = fill_batch(candidates, pk.seq_len, pk.max_examples, pk.batch_sequences)
    return batch, cursor + window - len(rest)


def vit_batch(config: RunConfig, images, cursor):
    """Square resize to ``vit_side``, one image per sequence, no dropping."""
    b, patch = config.packing.batch_sequences, config.packing.patch
    examples = [tokenize_square(images[(cursor + i) % len(images)], config.train.vit_side, patch)
                for i in range(b)]
    return layout([[ex] for ex in examples], len(examples[0]), 1), cursor + b


# -- training -----------------------------------------------------------------


@dataclass
class TrainState:
    step: int = 0
    cursor: int = 0
    images_seen: int = 0
    flops: float = 0.0
    mode: str = "navit"


def build_model(config: RunConfig):
    max_examples = 1 if config.train.mode == "vit" else config.packing.max_examples
    enc = config.encoder_config(max_examples)
    return init_params(enc, config.seed, text_tower=config.train.loss == "contrastive")


def build_optimizer(config: RunConfig):
    t = config.train
    schedule = Schedule(t.schedule, t.base_lr, t.warmup, t.cooldown, t.steps)
    return AdamW(schedule, weight_decay=t.weight_decay)


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _prepare_out(config: RunConfig):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(config))
    return out


TRAIN_HEADER = ["step", "loss", "lr", "images", "tokens", "padding_fraction", "images_seen", "flops"]


def run_train(config: RunConfig, resume=None):
    """Train and write ``checkpoint.nvck``, ``train_state.json``, ``train_metrics.csv`` and ``train_summary.json``."""
    out = _prepare_out(config)
    t = config.train
    with precision(config.model.precision):
        params = build_model(config)
        optimizer = build_optimizer(config)
        state = TrainState(mode=t.mode)
        if resume:
            load_checkpoint(params, resume, optimizer)
            saved = json.loads(Path(resume).with_name(STATE).read_text())
            state = TrainState(**saved)
            if state.mode != t.mode:
                raise ConfigError(f"checkpoint was trained in {state.mode} mode", "train.mode")
        images = load_images(config, "train")
        next_batch = vit_batch if t.mode == "vit" else navit_batch
        rows = []
        last_loss = None
        while state.step < t.steps:
            batch, cursor = next_batch(config, images, state.cursor)
            step_flops = encoder_flops(batch.seq_len, config.model.width, config.model.depth,
                                       batch.num_sequences, train=True)
            if t.flop_budget and state.flops + step_flops > t.flop_budget:
                break
            _, metrics = train_step(params, batch, t.loss, optimizer, **_loss_kwargs(t))
            state.step += 1
            state.cursor = cursor
            state.images_seen += metrics["images"]
            state.flops += metrics["flops"]
            last_loss = metrics["loss"]
            if state.step % t.log_every == 0:
                pad = float(batch.padding_tokens.sum()) / batch.owner.size
                rows.append([state.step, metrics["loss"], metrics["lr"], metrics["images"], metrics["tokens"],
                             pad, state.images_seen, state.flops])
        save_checkpoint(params, out / CHECKPOINT, optimizer)
        _write_json(out / STATE, state.__dict__)
        analysis.write_csv(out / "train_metrics.csv", f"train_metrics v{SCHEMA_VERSION}", TRAIN_HEADER, rows)
        summary = {"schema": f"train_summary v{SCHEMA_VERSION}", "mode": t.mode, "steps": state.step,
                   "images_seen": state.images_seen, "flops": state.flops, "final_loss": last_loss,
                   "parameters": int(params.count())}
        _write_json(out / "train_summary.json", summary)
    return summary, params


def _loss_kwargs(t):
    kw = {}
    if t.loss == "contrastive":
        kw["temperature"] = t.temperature
        kw["chunk"] = t.chunk or None
    return kw


# -- packing statistics -------------------------------------------------------


def run_pack_stats(config: RunConfig):
    """Pack the whole training split once and report padding, images per sequence and aspect ratios."""
    out = _prepare_out(config)
    pk = config.packing
    images = list(load_images(config, "train", pixels=False))
    examples = [navit_example(config, img, i, with_pixels=False) for i, img in enumerate(images)]
    batch = pack_first_fit(examples, pk.seq_len, pk.max_examples)
    stats = padding_stats(batch)
    aspects = aspect_stats(images)
    analysis.write_csv(out / "images_per_sequence.csv", f"images_per_sequence v{SCHEMA_VERSION}",
                       ["images_per_sequence", "sequences"], sorted(stats.images_per_sequence_hist.items()))
    edges = aspects.edges
    analysis.write_csv(out / "aspect_ratios.csv", f"aspect_ratios v{SCHEMA_VERSION}",
                       ["ratio_low", "ratio_high", "images"],
                       [[float(edges[i]), float(edges[i + 1]), int(c)] for i, c in enumerate(aspects.counts)])
    summary = {
        "schema": f"pack_stats v{SCHEMA_VERSION}",
        "images": stats.images,
        "sequences": stats.sequences,
        "tokens": int(sum(len(ex) for ex in examples)),
        "padding_tokens": stats.padding_tokens,
        "padding_fraction": stats.padding_fraction,
        "mean_images_per_sequence": stats.mean_images_per_sequence,
        "non_square_fraction": aspects.non_square_fraction,
    }
    _write_json(out / "pack_stats.json", summary)
    return summary


# -- evaluation ---------------------------------------------------------------


def posemb_grid(width, maxdim, grids, seed=0):
    """Evaluate every variant on square grids; table-lookup variants report range errors."""
    rows = []
    for variant in VARIANTS:
        table = init_posemb(variant, width, maxdim, make_rng(seed, f"posemb/{variant}"))
        for g in grids:
            try:
                emb = eval_posemb(table, grid_coords(g, g), g, g)
                finite = bool(np.isfinite(emb.data).all())
                rows.append([variant, g, maxdim, g * g, "ok" if finite else "non_finite", ""])
            except RangeError as exc:
                rows.append([variant, g, maxdim, g * g, "range_error", str(exc)])
    return rows


def run_eval(config: RunConfig, checkpoint):
    """Write one CSV per selected analysis; nothing at all when the selection is empty."""
    ev = config.eval
    if not ev.analyses:
        return {}
    with precision(config.model.precision):
        params = init_params(config.encoder_config(), config.seed,
                             text_tower=config.train.loss == "contrastive")
        load_checkpoint(params, checkpoint)
        out = _prepare_out(config)
        images = list(load_images(config, "eval"))
        needs_images = {"budget", "cascade", "ece"} & set(ev.analyses)
        if needs_images and not images:
            raise ConfigError("evaluation needs held-out images", "dataset.eval_count")
        summary = {"schema": f"eval_summary v{SCHEMA_VERSION}"}
        patch = config.packing.patch
        if "budget" in ev.analyses:
            points = analysis.token_budget_eval(params, images, ev.budgets, ev.reference_side, config.seed)
            analysis.write_csv(out / "budget_sweep.csv", f"budget_sweep v{SCHEMA_VERSION}",
                               ["budget", "mean_tokens", "accuracy", "mean_flops",
                                "drop_mean_tokens", "drop_accuracy", "drop_mean_flops"],
                               [[p.budget, p.mean_tokens, p.accuracy, p.mean_flops,
                                 p.drop_mean_tokens, p.drop_accuracy, p.drop_mean_flops] for p in points])
        if "cascade" in ev.analyses:
            n1, n2 = ev.cascade_budgets
            points = analysis.cascade_eval(params, images, n1, n2, ev.alphas)
            analysis.write_csv(out / "cascade.csv", f"cascade v{SCHEMA_VERSION}",
                               ["alpha", "budget1", "time1", "budget2", "time2", "escalated", "accuracy", "time"],
                               [[p.alpha, p.budget1, p.time1, p.budget2, p.time2, p.escalated, p.accuracy, p.time]
                                for p in points])
        if "ece" in ev.analyses:
            reference = analysis.predict(params, [tokenize(img, ev.reference_side, patch) for img in images])
            report = analysis.expected_calibration_error(reference.confidence, reference.correct)
            width = 1.0 / report.buckets
            analysis.write_csv(out / "calibration.csv", f"calibration v{SCHEMA_VERSION}",
                               ["bucket", "low", "high", "count", "mean_confidence", "accuracy"],
                               [[b, b * width, (b + 1) * width, int(report.counts[b]),
                                 _finite_or_blank(report.mean_confidence[b]), _finite_or_blank(report.accuracy[b])]
                                for b in range(report.buckets)])
            sweep = []
            for budget in ev.budgets:
                preds = analysis.evaluate_at_budget(params, images, budget)
                sweep.append([budget, preds.accuracy,
                              analysis.expected_calibration_error(preds.confidence, preds.correct).ece])
            analysis.write_csv(out / "ece_by_budget.csv", f"ece_by_budget v{SCHEMA_VERSION}",
                               ["budget", "accuracy", "ece"], sweep)
            summary["reference_accuracy"] = reference.accuracy
            summary["ece"] = report.ece
        if "posemb" in ev.analyses:
            analysis.write_csv(out / "posemb_grid.csv", f"posemb_grid v{SCHEMA_VERSION}",
                               ["variant", "grid", "maxdim", "tokens", "status", "detail"],
                               posemb_grid(config.model.width, config.model.maxdim, ev.posemb_grids, config.seed))
        if "flops" in ev.analyses:
            rows = []
            for k in ev.flop_packs:
                for d in ev.flop_widths:
                    rows.append([d, ev.flop_tokens, k, analysis.flop_overhead(d, ev.flop_tokens, k),
                                 analysis.flop_overhead_closed_form(d, ev.flop_tokens, k)])
            analysis.write_csv(out / "flop_overhead.csv", f"flop_overhead v{SCHEMA_VERSION}",
                               ["width", "tokens", "pack", "overhead", "closed_form"], rows)
        _write_json(out / "eval_summary.json", summary)
    return summary


def _finite_or_blank(value):
    return "" if math.isnan(value) else float(value)
