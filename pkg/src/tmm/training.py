"""AdamW, the warmup/decay schedule, and the three training protocols.

* causal LM on windowed token data (:func:`train_clm`)
* the duplicated-segment copy task (:func:`make_copy_batch`, :func:`train_copy`,
  :func:`copy_eval`)
* a simplified retention/capacity probe (:func:`train_retention`): the decoder
  receives the encoder's last-position final hidden state broadcast to every
  position plus a learned per-position vector.  This is a stand-in for the
  sliding-window "unrolled" projection and its metrics are labelled
  ``simplified-retention``.

Every protocol yields plain-dict metric records suitable for JSONL logging.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from tmm import autodiff as ad
from tmm.autodiff import Tensor
from tmm.model import ModelConfig, TMModel, build

log = logging.getLogger(__name__)

RETENTION_LABEL = "simplified-retention"


# ---------------------------------------------------------------- schedule


@dataclass
class Schedule:
    peak_lr: float
    total_steps: int
    warmup_steps: int = 500

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ValueError(
                f"need 0 < warmup_steps <= total_steps, got {self.warmup_steps}, {self.total_steps}"
            )


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear ramp to the peak over the warmup, then linear decay to zero."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    if schedule.total_steps == schedule.warmup_steps:
        return schedule.peak_lr
    return schedule.peak_lr * (schedule.total_steps - step) / (
        schedule.total_steps - schedule.warmup_steps
    )


# ---------------------------------------------------------------- AdamW


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    ``params`` maps names to arrays.  Names missing from ``grads`` (or mapped to
    None) are left untouched, which is how frozen Toeplitz layers are skipped.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: grad {g.shape} != param {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values() if g is not None))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= s
    return total


@dataclass
class RunConfig:
    steps: int = 2000
    batch_size: int = 16
    peak_lr: float = 5e-4
    warmup_steps: int = 500
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_every: int = 200
    eval_batches: int = 8
    seed: int = 0
    checkpoint: str | None = None
    checkpoint_every: int = 0

    def schedule(self) -> Schedule:
        return Schedule(self.peak_lr, self.steps, min(self.warmup_steps, self.steps))


def train_step(model, loss_fn: Callable[[], Tensor], state: OptimizerState, lr: float,
               grad_clip: float = 1.0, params: dict | None = None) -> float:
    """Record ``loss_fn`` on a fresh tape, backprop, clip and apply AdamW."""
    params = model.trainable() if params is None else params
    for t in params.values():
        t.grad = None
    with ad.Tape():
        loss = loss_fn()
        ad.backward(loss)
    grads = {k: t.grad for k, t in params.items()}
    clip_grad_norm(grads, grad_clip)
    adamw_step({k: t.data for k, t in params.items()}, grads, state, lr)
    return float(loss.data)


def lm_loss(model: TMModel, windows: np.ndarray) -> Tensor:
    windows = np.asarray(windows)
    return ad.cross_entropy(model(windows[:, :-1]), windows[:, 1:])


def evaluate_lm(model: TMModel, windows: np.ndarray, batch_size: int = 32) -> float:
    """Token-weighted mean next-token loss over all windows (no tape)."""
    total, count = 0.0, 0
    for i in range(0, len(windows), batch_size):
        w = windows[i : i + batch_size]
        n = w.shape[0] * (w.shape[1] - 1)
        total += float(lm_loss(model, w).data) * n
        count += n
    return total / count


def train_clm(model: TMModel, train_windows: np.ndarray, eval_windows: np.ndarray | None,
              run: RunConfig, state: OptimizerState | None = None) -> Iterator[dict]:
    """Next-token training over fixed windows; yields one record per step."""
    from tmm import formats

    train_windows = np.asarray(train_windows)
    if len(train_windows) == 0:
        raise ValueError("train_clm: empty training dataset")
    if train_windows.shape[1] - 1 > model.config.n_ctx:
        raise ValueError(
            f"windows of length {train_windows.shape[1]} exceed n_ctx + 1 = {model.config.n_ctx + 1}"
        )
    state = state or OptimizerState(weight_decay=run.weight_decay)
    sched = run.schedule()
    rng = np.random.default_rng(run.seed)
    order = rng.permutation(len(train_windows))
    cursor = 0
    for step in range(1, run.steps + 1):
        if cursor + run.batch_size > len(order):
            order, cursor = rng.permutation(len(train_windows)), 0
        idx = order[cursor : cursor + run.batch_size]
        cursor += run.batch_size
        batch = train_windows[idx]
        lr = lr_at(step, sched)
        loss = train_step(model, lambda: lm_loss(model, batch), state, lr, run.grad_clip)
        rec = {"step": step, "lr": lr, "loss": loss}
        if eval_windows is not None and len(eval_windows) and (
            step % run.eval_every == 0 or step == run.steps
        ):
            rec["eval_loss"] = evaluate_lm(model, eval_windows[: run.eval_batches * run.batch_size])
        if run.checkpoint and run.checkpoint_every and (
            step % run.checkpoint_every == 0 or step == run.steps
        ):
            formats.save_checkpoint(run.checkpoint, model, state)
        yield rec


def unigram_entropy(tokens, vocab_size: int | None = None) -> float:
    """Entropy in nats of the empirical token distribution."""
    counts = np.bincount(np.asarray(tokens).reshape(-1), minlength=vocab_size or 0)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------- copy task


@dataclass
class CopyBatch:
    tokens: np.ndarray  # (B, 2L)
    loss_mask: np.ndarray  # (B, 2L - 1), aligned with input positions

    @property
    def segment(self) -> int:
        return self.tokens.shape[1] // 2

    def check(self) -> None:
        L = self.segment
        if not np.array_equal(self.tokens[:, L:], self.tokens[:, :L]):
            raise AssertionError("copy batch violates the duplication invariant")


def copy_mask(L: int, batch: int, unmasked: bool = False) -> np.ndarray:
    mask = np.zeros((batch, 2 * L - 1))
    mask[:, L - 1 :] = 1.0
    if unmasked:
        mask[:] = 1.0
    return mask


def make_copy_batch(corpus, L: int, B: int, rng: np.random.Generator,
                    unmasked: bool = False) -> CopyBatch:
    """Sample B length-L corpus segments at random offsets and duplicate each."""
    corpus = np.asarray(corpus)
    if len(corpus) < L:
        raise ValueError(f"corpus of {len(corpus)} tokens is shorter than segment length {L}")
    starts = rng.integers(0, len(corpus) - L + 1, size=B)
    seg = corpus[starts[:, None] + np.arange(L)[None, :]].astype(np.int64)
    batch = CopyBatch(np.concatenate([seg, seg], axis=1), copy_mask(L, B, unmasked))
    if ad.DEBUG:
        batch.check()
    return batch


def copy_loss(model: TMModel, batch: CopyBatch) -> Tensor:
    return ad.cross_entropy(model(batch.tokens[:, :-1]), batch.tokens[:, 1:], batch.loss_mask)


def _logits_of(model, tokens) -> np.ndarray:
    out = model(tokens)
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def copy_eval(model, batches) -> tuple[float, float]:
    """Exact-sequence and per-token accuracy on the second copy, one forward per batch.

    ``model`` is anything mapping ``(B, N)`` ids to ``(B, N, V)`` logits.
    """
    rows = exact = correct = total = 0
    for batch in batches:
        L = batch.segment
        if isinstance(model, TMModel) and model.config.n_ctx < 2 * L - 1:
            raise ValueError(f"model context {model.config.n_ctx} too short for L={L}")
        pred = _logits_of(model, batch.tokens[:, :-1])[:, L - 1 :].argmax(axis=-1)
        hit = pred == batch.tokens[:, L:]
        exact += int(hit.all(axis=1).sum())
        correct += int(hit.sum())
        rows += hit.shape[0]
        total += hit.size
    return exact / rows, correct / total


def copy_eval_batches(corpus, L: int, B: int, n_batches: int, seed: int) -> list[CopyBatch]:
    rng = np.random.default_rng(seed)
    return [make_copy_batch(corpus, L, B, rng) for _ in range(n_batches)]


def train_copy(model: TMModel, train_corpus, eval_corpus, L: int, run: RunConfig,
               unmasked: bool = False, target_acc: float | None = None,
               eval_final_batches: int | None = None) -> Iterator[dict]:
    """Copy-task training; yields per-step records.

    Every ``eval_every`` steps the exact accuracy is measured on
    ``run.eval_batches`` held-out batches.  With ``target_acc`` set, a probe
    reaching it triggers a full evaluation on ``eval_final_batches`` batches
    and training stops once that passes.
    """
    state = OptimizerState(weight_decay=run.weight_decay)
    sched = run.schedule()
    rng = np.random.default_rng(run.seed)
    probe = copy_eval_batches(eval_corpus, L, run.batch_size, run.eval_batches, run.seed + 1)
    final_n = eval_final_batches or run.eval_batches
    for step in range(1, run.steps + 1):
        batch = make_copy_batch(train_corpus, L, run.batch_size, rng, unmasked)
        lr = lr_at(step, sched)
        loss = train_step(model, lambda: copy_loss(model, batch), state, lr, run.grad_clip)
        rec = {"step": step, "lr": lr, "loss": loss}
        done = False
        if step % run.eval_every == 0 or step == run.steps:
            rec["exact_copy_acc"], rec["token_copy_acc"] = copy_eval(model, probe)
            if target_acc is not None and (rec["exact_copy_acc"] >= target_acc or step == run.steps):
                full = copy_eval_batches(eval_corpus, L, run.batch_size, final_n, run.seed + 2)
                rec["final_exact_copy_acc"], rec["final_token_copy_acc"] = copy_eval(model, full)
                done = rec["final_exact_copy_acc"] >= target_acc
        yield rec
        if done:
            return


# ---------------------------------------------------------------- retention probe


class RetentionProbe:
    """Encoder bottleneck (last position, final hidden layer) -> decoder reconstruction."""

    def __init__(self, encoder: TMModel, decoder: TMModel, seed: int = 0):
        ec, dc = encoder.config, decoder.config
        if ec.d_model != dc.d_model or ec.n_ctx < dc.n_ctx or ec.vocab_size != dc.vocab_size:
            raise ValueError(
                "retention probe needs equal d_model and vocab_size and encoder n_ctx >= decoder n_ctx"
            )
        self.encoder = encoder
        self.decoder = decoder
        rng = np.random.default_rng(seed)
        self.positions = Tensor(
            rng.normal(0.0, 1.0, size=(dc.d_model, dc.n_ctx)).astype(decoder.params["head"].data.dtype),
            requires_grad=True, name="decoder.positions",
        )

    def trainable(self, train_encoder: bool) -> dict[str, Tensor]:
        out = {f"decoder.{k}": t for k, t in self.decoder.trainable().items() if k != "embed"}
        out["decoder.positions"] = self.positions
        if train_encoder:
            out |= {f"encoder.{k}": t for k, t in self.encoder.trainable().items()}
        return out

    def forward(self, tokens) -> Tensor:
        tokens = np.asarray(tokens)
        n = tokens.shape[1]
        h = self.encoder.hidden(self.encoder.trunk(self.encoder.embed(tokens)))
        code = ad.slice_rows(h, n - 1, n, axis=-1)  # (B, D, 1)
        x = ad.add(code, ad.slice_rows(self.positions, 0, n, axis=-1))
        return self.decoder.logits(self.decoder.hidden(self.decoder.trunk(x)))

    __call__ = forward

    def loss(self, tokens) -> Tensor:
        return ad.cross_entropy(self.forward(tokens), tokens)

    def accuracy(self, tokens) -> float:
        pred = self.forward(tokens).data.argmax(axis=-1)
        return float((pred == np.asarray(tokens)).mean())


def random_symbols(rng: np.random.Generator, batch: int, n: int, vocab: int = 2) -> np.ndarray:
    return rng.integers(0, vocab, size=(batch, n))


def train_retention(encoder_config: ModelConfig, decoder_config: ModelConfig, run: RunConfig,
                    mode: str = "capacity", encoder: TMModel | None = None,
                    sample: Callable | None = None, eval_tokens: np.ndarray | None = None,
                    target_acc: float | None = None) -> dict:
    """Train the reconstruction probe and report per-token accuracy.

    ``mode="capacity"`` trains encoder and decoder together; ``"retention"``
    freezes ``encoder`` (pretrained, or freshly built when omitted) and trains
    only the decoder.  ``sample(rng, B)`` draws ``(B, n_ctx)`` inputs; the
    default is uniform random symbols over the encoder vocabulary.
    """
    if mode not in ("capacity", "retention"):
        raise ValueError(f"mode must be 'capacity' or 'retention', got {mode!r}")
    n = decoder_config.n_ctx
    v = encoder_config.vocab_size
    sample = sample or (lambda r, b: random_symbols(r, b, n, v))
    enc = encoder if encoder is not None else build(encoder_config)
    dec = build(decoder_config)
    if mode == "retention":
        for t in enc.params.values():
            t.requires_grad = False
    probe = RetentionProbe(enc, dec, seed=run.seed)
    params = probe.trainable(train_encoder=(mode == "capacity"))
    state = OptimizerState(weight_decay=run.weight_decay)
    sched = run.schedule()
    rng = np.random.default_rng(run.seed)
    if eval_tokens is None:
        eval_tokens = sample(np.random.default_rng(run.seed + 7919), 512)
    history = []
    acc = probe.accuracy(eval_tokens)
    steps_run = 0
    for step in range(1, run.steps + 1):
        tokens = sample(rng, run.batch_size)
        lr = lr_at(step, sched)
        loss = train_step(None, lambda: probe.loss(tokens), state, lr, run.grad_clip, params=params)
        steps_run = step
        if step % run.eval_every == 0 or step == run.steps:
            acc = probe.accuracy(eval_tokens)
            history.append({"step": step, "lr": lr, "loss": loss, "accuracy": acc})
            log.info("%s %s step %d loss %.4f acc %.4f", RETENTION_LABEL, mode, step, loss, acc)
            if target_acc is not None and acc >= target_acc:
                break
    return {
        "label": RETENTION_LABEL,
        "mode": mode,
        "accuracy": acc,
        "steps": steps_run,
        "eval_loss": float(probe.loss(eval_tokens).data),
        "history": history,
    }


def symbol_corpus(n_tokens: int, vocab: int = 2, seed: int = 0) -> np.ndarray:
    """Long uniform random symbol stream, used to draw synthetic copy segments."""
    return np.random.default_rng(seed).integers(0, vocab, size=n_tokens)


def pretrain_copy_encoder(config: ModelConfig, run: RunConfig, corpus_tokens: int = 1 << 16,
                          segment: int | None = None) -> tuple[TMModel, dict]:
    """Copy-train an encoder on random symbols with segment length ``segment`` (default n_ctx // 2)."""
    enc = build(config)
    L = segment or config.n_ctx // 2
    if 2 * L > config.n_ctx:
        raise ValueError(f"copy segment {L} needs n_ctx >= {2 * L}, got {config.n_ctx}")
    corpus = symbol_corpus(corpus_tokens, config.vocab_size, run.seed)
    held = symbol_corpus(corpus_tokens // 8, config.vocab_size, run.seed + 1)
    last = {}
    for rec in train_copy(enc, corpus, held, L, run):
        if "exact_copy_acc" in rec:
            last = rec
            log.info("copy pretrain step %d loss %.4f exact %.3f",
                     rec["step"], rec["loss"], rec["exact_copy_acc"])
    return enc, last


def retention_suite(config: ModelConfig, run: RunConfig, pretrain: RunConfig,
                    target_acc: float | None = None, full_copy: bool = True) -> dict:
    """Capacity, retention (copy-pretrained frozen encoder) and untrained-encoder baseline.

    With ``full_copy`` the retention encoder has context 2 * n_ctx and is
    copy-trained on whole n_ctx-symbol sequences, the same inputs it later
    encodes; otherwise it copies n_ctx // 2 segments within n_ctx.  The
    untrained baseline uses the same encoder config.  All probes share the
    decoder config, the data stream and the held-out evaluation set.
    """
    n, v = config.n_ctx, config.vocab_size
    enc_config = replace(config, n_ctx=2 * n) if full_copy else config
    eval_tokens = random_symbols(np.random.default_rng(run.seed + 7919), 512, n, v)
    capacity = train_retention(config, config, run, "capacity", eval_tokens=eval_tokens,
                               target_acc=target_acc)
    encoder, copy_rec = pretrain_copy_encoder(enc_config, pretrain, segment=n if full_copy else None)
    retention = train_retention(enc_config, config, run, "retention", encoder=encoder,
                                eval_tokens=eval_tokens)
    baseline = train_retention(enc_config, config, run, "retention", encoder=build(enc_config),
                               eval_tokens=eval_tokens)
    baseline["mode"] = "untrained-baseline"
    return {"label": RETENTION_LABEL, "capacity": capacity, "retention": retention,
            "baseline": baseline, "copy_pretrain": copy_rec}
