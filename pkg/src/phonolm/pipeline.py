"""End-to-end orchestration: tokenize a corpus, train the two-stage system
(AR over phonetic tokens + NAR over codec layers), train the single-stage
baseline (AR over layer-1 codec ids + NAR over the remaining layers), and
synthesize via acoustic prompting.

Training prompts are a random prefix of the same utterance, cut at a duration
slot boundary so the 2:3 phonetic/acoustic alignment stays exact: a prefix of
k slots is 2k phonetic tokens and 3k acoustic frames. The phoneme input
always covers the whole utterance, which is the same layout inference uses
(prompt transcript concatenated with the text to synthesize).

Batch selection and prompt-split draws come from rng streams that depend only
on (seed, step), never on the system variant, so proposed and baseline
trainings with the same seed consume identical batches and differ only in the
target stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import model as md
from . import numerics as nm
from . import quantizer as qz
from . import tokenworld as tw
from .numerics import AdamState, ContractError, Tape, adam_step, backward, clip_grad_norm, fill_missing_grads
from .quantizer import Quantizers

MODE_PROPOSED_AR = "proposed_ar"
MODE_NAR = "nar"
MODE_BASELINE_AR = "baseline_ar"
MODE_BASELINE_NAR = "baseline_nar"
MODES = (MODE_PROPOSED_AR, MODE_NAR, MODE_BASELINE_AR, MODE_BASELINE_NAR)

KIND_PROPOSED = "proposed"
KIND_BASELINE = "baseline"

PROMPT_FRACTION = (0.2, 0.5)

_IDX_STREAM = 0x11
_SPLIT_STREAM = 0x22
_LAYER_STREAM = 0x33
_DROP_STREAM = 0x44

_EVAL_SPLIT_FRACS = (0.25, 0.35, 0.45)  # fixed prompt splits for accuracy probes


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss) or could not proceed."""


@dataclass
class TrainingConfig:
    steps: int = 600
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_interval: int = 0
    mode: str = ""

    def __post_init__(self):
        if self.steps <= 0:
            raise ContractError("steps must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)


@dataclass
class TokenizedUtterance:
    phonemes: np.ndarray
    phonetic: np.ndarray   # (2 * slots,)
    codes: np.ndarray      # (3 * slots, n_layers)
    speaker_id: int

    @property
    def slots(self) -> int:
        return self.phonetic.shape[0] // 2


def tokenize_utterances(utts, quantizers: Quantizers) -> list:
    out = []
    for u in utts:
        out.append(
            TokenizedUtterance(
                phonemes=np.asarray(u.phonemes, dtype=np.int64),
                phonetic=qz.kmeans_assign(u.phonetic_frames, quantizers.phonetic),
                codes=qz.rvq_encode(u.acoustic_frames, quantizers.rvq),
                speaker_id=u.speaker_id,
            )
        )
    return out


def split_slots(slots: int, frac: float) -> int:
    """Prompt length in slots for a 20-50% prefix split."""
    if slots < 2:
        raise ContractError("utterance too short to split into prompt and target")
    return min(max(int(round(frac * slots)), 1), slots - 1)


def batch_schedule(n_items: int, config: TrainingConfig) -> tuple:
    """(idxs, fracs) arrays of shape (steps, batch): the full draw plan.

    Depends only on (n_items, steps, batch_size, seed); every trainer mode
    consumes the same plan.
    """
    shape = (config.steps, config.batch_size)
    idx_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, _IDX_STREAM])))
    split_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, _SPLIT_STREAM])))
    idxs = idx_rng.integers(0, n_items, size=shape)
    fracs = split_rng.uniform(PROMPT_FRACTION[0], PROMPT_FRACTION[1], size=shape)
    return idxs, fracs


def layer_schedule(config: TrainingConfig, min_layer: int, n_layers: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, _LAYER_STREAM])))
    return rng.integers(min_layer, n_layers + 1, size=(config.steps, config.batch_size))


def ar_training_items(tokenized, idxs, fracs, stream: str) -> list:
    """(phonemes, prompt, target) triples for one AR step."""
    items = []
    for i, f in zip(idxs, fracs):
        tu = tokenized[int(i)]
        k = split_slots(tu.slots, float(f))
        if stream == md.STREAM_PHONETIC:
            items.append((tu.phonemes, tu.phonetic[: 2 * k], tu.phonetic[2 * k :]))
        else:
            items.append((tu.phonemes, tu.codes[: 3 * k, 0], tu.codes[3 * k :, 0]))
    return items


def nar_training_items(tokenized, idxs, fracs, layers, variant: str) -> tuple:
    """(model items, label ids) for one NAR step."""
    items, labels = [], []
    for i, f, j in zip(idxs, fracs, layers):
        tu = tokenized[int(i)]
        k = split_slots(tu.slots, float(f))
        j = int(j)
        prompt_codes = tu.codes[: 3 * k]
        target_codes = tu.codes[3 * k :]
        cond = qz.upsample_tokens(tu.phonetic[2 * k :]) if variant == md.VARIANT_PROPOSED else None
        items.append((tu.phonemes, cond, prompt_codes, target_codes[:, : j - 1], j))
        labels.append(target_codes[:, j - 1])
    return items, np.concatenate(labels)


def _run_training(model, step_forward, config: TrainingConfig, snapshot=None) -> list:
    """Shared loop: step_forward(step, tape_active_rng) -> scalar loss Tensor."""
    params = model.parameters()
    adam = AdamState(learning_rate=config.learning_rate)
    drop_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, _DROP_STREAM])))
    losses = []
    for step in range(config.steps):
        with Tape() as tape:
            loss = step_forward(step, drop_rng)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}")
        backward(loss, tape)
        grads = fill_missing_grads(params)
        clip_grad_norm(grads, config.grad_clip)
        adam_step(params, grads, adam)
        losses.append(value)
        if snapshot and config.checkpoint_interval > 0 and (step + 1) % config.checkpoint_interval == 0:
            snapshot(step + 1, model)
    return losses


def _train_ar_stream(corpus, quantizers, config, stream, model_config):
    tokenized = tokenize_utterances(corpus.train, quantizers)
    if model_config is None:
        model_config = default_model_config(corpus.world_spec, quantizers)
    _check_vocab(model_config, quantizers)
    model = md.build_ar_model(model_config, stream, seed=config.seed)
    idxs, fracs = batch_schedule(len(tokenized), config)

    def step_forward(step, drop_rng):
        items = ar_training_items(tokenized, idxs[step], fracs[step], stream)
        logits, targets = md.ar_batch_logits(model, items, train=True, rng=drop_rng)
        return nm.cross_entropy(logits, targets)

    losses = _run_training(model, step_forward, config)
    return model, losses


def _train_nar_variant(corpus, quantizers, config, variant, model_config):
    tokenized = tokenize_utterances(corpus.train, quantizers)
    if model_config is None:
        model_config = default_model_config(corpus.world_spec, quantizers)
    _check_vocab(model_config, quantizers)
    model = md.build_nar_model(model_config, variant, seed=config.seed)
    idxs, fracs = batch_schedule(len(tokenized), config)
    layers = layer_schedule(config, model.min_layer, model_config.n_codec_layers)

    def step_forward(step, drop_rng):
        items, labels = nar_training_items(tokenized, idxs[step], fracs[step], layers[step], variant)
        logits = md.nar_batch_logits(model, items, train=True, rng=drop_rng)
        return nm.cross_entropy(logits, labels)

    losses = _run_training(model, step_forward, config)
    return model, losses


def train_ar(corpus, quantizers, config, model_config=None):
    """Phoneme -> phonetic-token AR decoder (stage one of the two-stage system)."""
    return _train_ar_stream(corpus, quantizers, config, md.STREAM_PHONETIC, model_config)


def train_baseline_ar(corpus, quantizers, config, model_config=None):
    """Phoneme -> layer-1-codec AR decoder (the single-stage baseline's stage one).

    Identical to train_ar except for the target alphabet, which by world
    construction entangles content, speaker and recording noise.
    """
    return _train_ar_stream(corpus, quantizers, config, md.STREAM_CODEC, model_config)


def train_nar(corpus, quantizers, config, model_config=None):
    """Phonetic-token-conditioned NAR codec decoder (layers 1..L)."""
    return _train_nar_variant(corpus, quantizers, config, md.VARIANT_PROPOSED, model_config)


def train_baseline_nar(corpus, quantizers, config, model_config=None):
    """Layer-1-conditioned NAR codec decoder (layers 2..L) for the baseline."""
    return _train_nar_variant(corpus, quantizers, config, md.VARIANT_BASELINE, model_config)


def train_mode(mode: str, corpus, quantizers, config, model_config=None):
    fns = {
        MODE_PROPOSED_AR: train_ar,
        MODE_NAR: train_nar,
        MODE_BASELINE_AR: train_baseline_ar,
        MODE_BASELINE_NAR: train_baseline_nar,
    }
    if mode not in fns:
        raise ContractError(f"unknown training mode {mode!r}; expected one of {MODES}")
    return fns[mode](corpus, quantizers, config, model_config)


def fit_corpus_quantizers(
    corpus: tw.Corpus,
    k_phonetic: int = 64,
    k_codec: int = 32,
    n_layers: int = 8,
    max_iters: int = 30,
    seed: int = 0,
) -> Quantizers:
    """Fit the phonetic codebook and acoustic RVQ on the train split only."""
    phonetic_frames = np.concatenate([u.phonetic_frames for u in corpus.train])
    acoustic_frames = np.concatenate([u.acoustic_frames for u in corpus.train])
    return Quantizers(
        phonetic=qz.kmeans_fit(phonetic_frames, k_phonetic, max_iters=max_iters, seed=seed),
        rvq=qz.rvq_fit(acoustic_frames, layers=n_layers, k=k_codec, max_iters=max_iters, seed=seed + 1),
    )


def default_model_config(world_spec: tw.WorldSpec, quantizers: Quantizers) -> md.ModelConfig:
    return md.desk_model_config(
        phoneme_vocab=world_spec.phoneme_vocab_size,
        phonetic_vocab=quantizers.phonetic.k,
        codec_vocab=quantizers.rvq.vocab,
        n_codec_layers=quantizers.rvq.n_layers,
    )


def _check_vocab(model_config: md.ModelConfig, quantizers: Quantizers):
    if model_config.phonetic_vocab != quantizers.phonetic.k:
        raise ContractError(
            f"model phonetic_vocab {model_config.phonetic_vocab} != codebook K {quantizers.phonetic.k}"
        )
    if model_config.codec_vocab != quantizers.rvq.vocab:
        raise ContractError(
            f"model codec_vocab {model_config.codec_vocab} != RVQ K {quantizers.rvq.vocab}"
        )
    if model_config.n_codec_layers != quantizers.rvq.n_layers:
        raise ContractError("model n_codec_layers != RVQ layer count")


# ---------------------------------------------------------------------------
# teacher-forced accuracy probes
# ---------------------------------------------------------------------------


def ar_teacher_forced_accuracy(model, tokenized) -> float:
    """Next-token accuracy over fixed prompt splits, no dropout."""
    hits = total = 0
    for frac in _EVAL_SPLIT_FRACS:
        items = ar_training_items(
            tokenized, np.arange(len(tokenized)), np.full(len(tokenized), frac), model.role
        )
        logits, targets = md.ar_batch_logits(model, items)
        hits += int((logits.data.argmax(axis=1) == targets).sum())
        total += targets.size
    return hits / total


def nar_teacher_forced_accuracy(model, tokenized) -> float:
    """Argmax accuracy over every predicted layer, fixed prompt splits."""
    hits = total = 0
    n_layers = model.config.n_codec_layers
    for frac in _EVAL_SPLIT_FRACS:
        for j in range(model.min_layer, n_layers + 1):
            items, labels = nar_training_items(
                tokenized,
                np.arange(len(tokenized)),
                np.full(len(tokenized), frac),
                np.full(len(tokenized), j),
                model.role,
            )
            logits = md.nar_batch_logits(model, items)
            hits += int((logits.data.argmax(axis=1) == labels).sum())
            total += labels.size
    return hits / total


# ---------------------------------------------------------------------------
# synthesis via prompting
# ---------------------------------------------------------------------------


@dataclass
class SynthesisRequest:
    phonemes: list
    prompt: tw.Utterance
    temperature: float = 1.0
    top_k: int = 8
    max_length_factor: float = 2.0

    def __post_init__(self):
        if self.max_length_factor <= 1:
            raise ContractError("max_length_factor must exceed 1")
        if len(self.phonemes) == 0:
            raise ContractError("empty phoneme request")
        if self.prompt is None or len(self.prompt.phonemes) == 0:
            raise ContractError("empty acoustic prompt")


@dataclass
class SynthesisResult:
    codes: np.ndarray              # (frames, n_layers)
    phonetic_tokens: np.ndarray | None
    runaway: bool
    generated_length: int


@dataclass
class SystemBundle:
    world_spec: tw.WorldSpec
    quantizers: Quantizers
    ar: md.DecoderModel
    nar: md.DecoderModel
    kind: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (KIND_PROPOSED, KIND_BASELINE):
            raise ContractError(f"unknown bundle kind {self.kind!r}")
        want_stream = md.STREAM_PHONETIC if self.kind == KIND_PROPOSED else md.STREAM_CODEC
        want_variant = md.VARIANT_PROPOSED if self.kind == KIND_PROPOSED else md.VARIANT_BASELINE
        if self.ar.kind != md.AR or self.ar.role != want_stream:
            raise ContractError(f"{self.kind} bundle needs an AR model over {want_stream} tokens")
        if self.nar.kind != md.NAR or self.nar.role != want_variant:
            raise ContractError(f"{self.kind} bundle needs a {want_variant} NAR model")
        _check_vocab(self.ar.config, self.quantizers)
        _check_vocab(self.nar.config, self.quantizers)
        if self.world_spec.phoneme_vocab_size != self.ar.config.phoneme_vocab:
            raise ContractError("phoneme vocab mismatch between world and model")


def _expected_generation(request: SynthesisRequest, spec: tw.WorldSpec, stream: str) -> int:
    rate = spec.phonetic_rate_per_slot if stream == md.STREAM_PHONETIC else spec.acoustic_rate_per_slot
    return max(1, int(round(len(request.phonemes) * spec.mean_slots_per_phoneme * rate)))


@dataclass
class _GenEntry:
    phonemes: np.ndarray
    prompt_stream: np.ndarray
    prompt_codes: np.ndarray
    prompt_cond: np.ndarray | None
    cap: int
    temperature: float
    top_k: int
    rng: np.random.Generator
    generated: list = field(default_factory=list)
    done: bool = False
    runaway: bool = False


def _prepare_entry(bundle: SystemBundle, request: SynthesisRequest, rng) -> _GenEntry:
    q = bundle.quantizers
    prompt_tokens = qz.kmeans_assign(request.prompt.phonetic_frames, q.phonetic)
    prompt_codes = qz.rvq_encode(request.prompt.acoustic_frames, q.rvq)
    phonemes = np.concatenate(
        [np.asarray(request.prompt.phonemes, dtype=np.int64), np.asarray(request.phonemes, dtype=np.int64)]
    )
    if phonemes.max() >= bundle.world_spec.phoneme_vocab_size or phonemes.min() < 0:
        raise ContractError("phoneme id out of range for this world")
    stream = bundle.ar.role
    prompt_stream = prompt_tokens if stream == md.STREAM_PHONETIC else prompt_codes[:, 0]
    cap = int(np.ceil(request.max_length_factor * _expected_generation(request, bundle.world_spec, stream)))
    base_len = len(phonemes) + 1 + len(prompt_stream)
    headroom = bundle.ar.config.max_sequence_len - base_len - 1
    if headroom < 1:
        raise ContractError("prompt leaves no room for generation under max_sequence_len")
    return _GenEntry(
        phonemes=phonemes,
        prompt_stream=prompt_stream,
        prompt_codes=prompt_codes,
        prompt_cond=prompt_tokens if bundle.kind == KIND_PROPOSED else None,
        cap=min(cap, headroom),
        temperature=request.temperature,
        top_k=request.top_k,
        rng=rng,
    )


def _generate_tokens(model: md.DecoderModel, entries: list) -> None:
    """Batched AR sampling until every entry emits STOP or hits its cap."""
    active = [e for e in entries if not e.done]
    while active:
        items = [
            (e.phonemes, e.prompt_stream, np.asarray(e.generated, dtype=np.int64)) for e in active
        ]
        logits, _ = md.ar_batch_logits(model, items)
        offset = 0
        for e in active:
            rows = len(e.generated) + 1
            row = logits.data[offset + rows - 1]
            offset += rows
            token = md.ar_sample_next(row, e.temperature, e.top_k, e.rng)
            if token == model.stop_id:
                e.done = True
            else:
                e.generated.append(token)
                if len(e.generated) >= e.cap:
                    e.done = True
                    e.runaway = True
        active = [e for e in active if not e.done]


def _predict_codes(bundle: SystemBundle, entries: list) -> list:
    """Greedy argmax NAR decode per layer, batched over entries."""
    nar = bundle.nar
    n_layers = nar.config.n_codec_layers
    results = []
    frames = []
    for e in entries:
        gen = np.asarray(e.generated, dtype=np.int64)
        if bundle.kind == KIND_PROPOSED:
            cond = qz.upsample_tokens(gen)
            n = cond.shape[0]
            codes = np.zeros((n, n_layers), dtype=np.int64)
        else:
            cond = None
            n = gen.shape[0]
            codes = np.zeros((n, n_layers), dtype=np.int64)
            if n:
                codes[:, 0] = gen
        frames.append((cond, codes))
    for j in range(nar.min_layer, n_layers + 1):
        items, live = [], []
        for e, (cond, codes) in zip(entries, frames):
            if codes.shape[0] == 0:
                continue
            items.append((e.phonemes, cond, e.prompt_codes, codes[:, : j - 1], j))
            live.append(codes)
        if not items:
            break
        logits = md.nar_batch_logits(bundle.nar, items)
        offset = 0
        for codes in live:
            n = codes.shape[0]
            codes[:, j - 1] = logits.data[offset : offset + n].argmax(axis=1)
            offset += n
    for e, (cond, codes) in zip(entries, frames):
        results.append(
            SynthesisResult(
                codes=codes,
                phonetic_tokens=np.asarray(e.generated, dtype=np.int64)
                if bundle.kind == KIND_PROPOSED
                else None,
                runaway=e.runaway,
                generated_length=len(e.generated),
            )
        )
    return results


def synthesize_many(bundle: SystemBundle, requests, seeds, chunk_size: int = 8) -> list:
    """Synthesize a list of requests with per-request sampling seeds.

    Requests are processed in fixed chunks of `chunk_size`, so results do not
    depend on how callers distribute chunks over workers.
    """
    if len(seeds) != len(requests):
        raise ContractError("one seed per request")
    out = []
    for start in range(0, len(requests), chunk_size):
        entries = [
            _prepare_entry(bundle, r, np.random.Generator(np.random.PCG64(int(s))))
            for r, s in zip(requests[start : start + chunk_size], seeds[start : start + chunk_size])
        ]
        _generate_tokens(bundle.ar, entries)
        out.extend(_predict_codes(bundle, entries))
    return out


def synthesize(bundle: SystemBundle, request: SynthesisRequest, rng: np.random.Generator) -> SynthesisResult:
    """Single-request synthesis: AR-sample tokens, upsample, NAR argmax decode."""
    entry = _prepare_entry(bundle, request, rng)
    _generate_tokens(bundle.ar, [entry])
    return _predict_codes(bundle, [entry])[0]


# ---------------------------------------------------------------------------
# bundle persistence (run directory layout)
# ---------------------------------------------------------------------------

_BUNDLE_FILES = {
    KIND_PROPOSED: ("ar.ckpt", "nar.ckpt"),
    KIND_BASELINE: ("baseline_ar.ckpt", "baseline_nar.ckpt"),
}


def bundle_file_names(kind: str) -> tuple:
    return _BUNDLE_FILES[kind]


def save_bundle(bundle: SystemBundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ar_name, nar_name = _BUNDLE_FILES[bundle.kind]
    bundle.ar.save(out / ar_name)
    bundle.nar.save(out / nar_name)
    qz.save_quantizers(bundle.quantizers, out / "quantizers.ckpt")
    meta = {
        "kind": bundle.kind,
        "world_spec": bundle.world_spec.to_dict(),
        "provenance": bundle.provenance,
    }
    (out / f"{bundle.kind}_bundle.json").write_text(json.dumps(meta, indent=2) + "\n")


def available_bundle_kinds(in_dir) -> list:
    src = Path(in_dir)
    kinds = []
    for kind, (ar_name, nar_name) in _BUNDLE_FILES.items():
        if (src / ar_name).exists() and (src / nar_name).exists() and (src / "quantizers.ckpt").exists():
            kinds.append(kind)
    return kinds


def missing_bundle_files(in_dir, kind: str) -> list:
    src = Path(in_dir)
    ar_name, nar_name = _BUNDLE_FILES[kind]
    return [n for n in (ar_name, nar_name, "quantizers.ckpt") if not (src / n).exists()]


def load_bundle(in_dir, kind: str) -> SystemBundle:
    src = Path(in_dir)
    missing = missing_bundle_files(in_dir, kind)
    if missing:
        raise ContractError(f"incomplete {kind} bundle in {src}: missing {missing}")
    ar_name, nar_name = _BUNDLE_FILES[kind]
    meta_path = src / f"{kind}_bundle.json"
    meta = json.loads(meta_path.read_text())
    return SystemBundle(
        world_spec=tw.WorldSpec.from_dict(meta["world_spec"]),
        quantizers=qz.load_quantizers(src / "quantizers.ckpt"),
        ar=md.load_model(src / ar_name),
        nar=md.load_model(src / nar_name),
        kind=kind,
        provenance=meta.get("provenance", {}),
    )
