"""End-to-end benchmark pipeline: detect, encode, project, filter, report.

A run takes a synthetic corpus through the full chain: content detection,
the gated hierarchical encoder, an MLP projector into the decoder
embedding space, instruction filtering, and a decoder-budget stub that
charges quadratic cost in the final sequence length. Everything the run
computes lands in a RunReport whose JSON serialization is a pure function
of (config, seed): integers stay exact, floats are fixed to 9 decimals,
keys are sorted, and wall-clock timings live in a separate sidecar so the
canonical report stays byte-reproducible.

The decoder stub charges DECODER_FLOPS_PER_TOKEN_SQ * L**2 for a final
sequence of L tokens, sized like a prefill pass of a small decoder
(2 FLOPs/MAC * 4096 hidden * 32 layers). It exists so threshold sweeps
move total compute the way an attached decoder would; only relative
comparisons between runs are meaningful.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .content_filter import (DetectorModel, ThresholdSchedule, detect,
                             load_detector, oracle_detector)
from .encoder import EncodeResult, EncoderModel, encode, encoder_init
from .instruction_filter import (FilterResult, IfmModel, InstructionSpec,
                                 embed_instruction, fuse, filter_tokens,
                                 grid_positions, ifm_init, load_ifm)
from .patching import PatchEmbed, ProbabilityMap, partition, patch_embed_init
from .rng import Rng
from .synthdoc import (LabeledImage, instruction_target, make_corpus,
                       mean_content_fraction, patchify_any)
from .tensor import FlopCounter, Mlp2, mlp2_forward, mlp2_init

SCHEMA_VERSION = 1
DECODER_FLOPS_PER_TOKEN_SQ = 2 * 4096 * 32

FLOP_CATEGORIES = ("patch_embed", "detector", "encoder_norm",
                   "encoder_attention", "encoder_ffn", "encoder_merge",
                   "projector", "ifm", "decoder_stub")

PROFILES = ("desk", "paper-scale")


class ConfigError(ValueError):
    """Invalid or inconsistent pipeline configuration."""


@dataclass
class PipelineConfig:
    profile: str = "desk"
    image_size: int = 256
    patch_size: int = 4
    d0: int = 32
    depths: tuple[int, ...] = (2, 2, 6, 2)
    window: int = 8
    ffn_ratio: int = 2
    proj_hidden: int = 128
    llm_dim: int = 64
    eps_c: tuple[float, ...] = (0.25, 0.25, 0.5, 0.5)
    eps_i: float = 0.5
    detector: str = "oracle"
    detector_weights: str | None = None
    ifm_weights: str | None = None
    gated: bool = True
    bypass: bool = True
    soft_gating: bool = False
    use_positions: bool = True
    context_budget: int = 4096
    corpus_n: int = 32
    content_fraction: float = 0.5
    seed: int = 0
    decoder_flops_per_token_sq: int = DECODER_FLOPS_PER_TOKEN_SQ

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.eps_c = tuple(self.eps_c)
        self.validate()

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.detector not in ("oracle", "mlp"):
            raise ConfigError(f"unknown detector variant {self.detector!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} does not divide image size "
                f"{self.image_size}")
        grid = self.image_size // self.patch_size
        if grid % 8:
            raise ConfigError(
                f"stage-1 grid {grid} must be divisible by 8 for three "
                "2x2 merges")
        if len(self.depths) != 4:
            raise ConfigError(f"need 4 stage depths, got {self.depths}")
        if self.context_budget < 1:
            raise ConfigError(
                f"context budget must be >= 1, got {self.context_budget}")
        if self.corpus_n < 1:
            raise ConfigError(f"corpus size must be >= 1, got {self.corpus_n}")
        try:
            self.schedule()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def schedule(self) -> ThresholdSchedule:
        return ThresholdSchedule(eps_c=self.eps_c, eps_i=self.eps_i)

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def stage4_side(self) -> int:
        return self.grid_side // 8

    @property
    def stage4_dim(self) -> int:
        return self.d0 * 8

    @staticmethod
    def desk(**overrides) -> "PipelineConfig":
        return PipelineConfig(**overrides)

    @staticmethod
    def paper_scale(**overrides) -> "PipelineConfig":
        base = dict(profile="paper-scale", image_size=1536, patch_size=4,
                    depths=(2, 2, 18, 2), window=10, corpus_n=4)
        base.update(overrides)
        return PipelineConfig(**base)

    KEYS = ("profile", "image_size", "patch_size", "d0", "depths", "window",
            "ffn_ratio", "proj_hidden", "llm_dim", "eps_c", "eps_i",
            "detector", "detector_weights", "ifm_weights", "gated", "bypass",
            "soft_gating", "use_positions", "context_budget", "corpus_n",
            "content_fraction", "seed", "decoder_flops_per_token_sq")

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        unknown = set(d) - set(PipelineConfig.KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return PipelineConfig(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


@dataclass
class Models:
    embed: PatchEmbed
    detector: DetectorModel
    encoder: EncoderModel
    projector: Mlp2
    ifm: IfmModel


def build_models(config: PipelineConfig, detector: DetectorModel | None = None,
                 ifm: IfmModel | None = None) -> Models:
    """Instantiate every model the pipeline needs, all seeded from config."""
    rng = Rng(config.seed)
    if detector is None:
        if config.detector == "oracle":
            detector = oracle_detector(config.patch_size)
        elif config.detector_weights:
            detector = load_detector(config.detector_weights)
        else:
            raise ConfigError(
                "detector variant 'mlp' needs trained weights: pass a model "
                "or set detector_weights")
    if detector.patch_size != config.patch_size:
        raise ConfigError(
            f"detector patch size {detector.patch_size} does not match "
            f"config {config.patch_size}")
    if ifm is None:
        if config.ifm_weights:
            ifm = load_ifm(config.ifm_weights)
        else:
            ifm = ifm_init(config.seed, config.llm_dim, config.ffn_ratio,
                           config.eps_i, config.use_positions)
    if ifm.dim != config.llm_dim:
        raise ConfigError(
            f"IFM dim {ifm.dim} does not match llm_dim {config.llm_dim}")
    return Models(
        embed=patch_embed_init(rng.derive("patch_embed"),
                               config.patch_size, config.d0),
        detector=detector,
        encoder=encoder_init(config.seed, config.d0, config.depths,
                             config.window, config.ffn_ratio),
        projector=mlp2_init(rng.derive("projector"), config.stage4_dim,
                            config.proj_hidden, config.llm_dim),
        ifm=ifm,
    )


def _mask_hex(bits: np.ndarray) -> str:
    return np.packbits(bits.astype(np.uint8)).tobytes().hex()


def mask_from_hex(s: str, side: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(bytes.fromhex(s), dtype=np.uint8))
    return bits[: side * side].reshape(side, side).astype(bool)


@dataclass
class DocArtifacts:
    doc: LabeledImage
    probs: ProbabilityMap
    encoded: EncodeResult
    projected: np.ndarray
    instruction: InstructionSpec
    filter_result: FilterResult
    final_tokens: np.ndarray


@dataclass
class RunReport:
    schema_version: int
    config: dict
    corpus: dict
    stages: list[dict]
    tokens: dict
    flops: dict
    context: dict
    per_doc: list[dict]
    timings_ms: dict = field(default_factory=dict)   # sidecar only

    def to_canonical(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "timings_ms"}
        return _round_floats(d)

    def to_json(self) -> str:
        return json.dumps(self.to_canonical(), sort_keys=True, indent=2) + "\n"


def _round_floats(obj):
    if isinstance(obj, float):
        return round(obj, 9)
    if isinstance(obj, bool) or isinstance(obj, int) or isinstance(obj, str):
        return obj
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def run(config: PipelineConfig, corpus: list[LabeledImage] | None = None,
        detector: DetectorModel | None = None, ifm: IfmModel | None = None,
        return_artifacts: bool = False):
    """Execute the pipeline over a corpus and assemble the report.

    The corpus defaults to the seeded synthetic corpus described by the
    config. With return_artifacts the per-document intermediate tensors
    come back alongside the report for the equivalence tests.
    """
    config.validate()
    models = build_models(config, detector, ifm)
    if corpus is None:
        t0 = time.perf_counter()
        corpus = make_corpus(config.corpus_n, config.content_fraction,
                             config.image_size, config.seed)
        gen_ms = (time.perf_counter() - t0) * 1e3
    else:
        gen_ms = 0.0
        if not corpus:
            raise ConfigError("corpus is empty")
        for doc in corpus:
            if doc.size != config.image_size:
                raise ConfigError(
                    f"corpus image size {doc.size} does not match config "
                    f"{config.image_size}")

    sched = config.schedule()
    counter = FlopCounter()
    timings = {"generate": gen_ms, "detect": 0.0, "encode": 0.0,
               "project": 0.0, "ifm": 0.0}
    instr_rng = Rng(config.seed).derive("instructions")

    stage_agg: list[dict] | None = None
    per_doc = []
    artifacts = []
    post_encoder_total = 0
    post_ifm_total = 0
    instr_total = 0
    max_sequence = 0
    s2_side = config.grid_side // 2
    s4_side = config.stage4_side

    for i, doc in enumerate(corpus):
        with counter.category("patch_embed"):
            grid = partition(doc.image, models.embed, counter)

        t0 = time.perf_counter()
        with counter.category("detector"):
            probs = detect(models.detector, doc, counter)
        timings["detect"] += (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        encoded = encode(models.encoder, grid, probs, sched,
                         gated=config.gated, bypass=config.bypass,
                         soft=config.soft_gating, counter=counter)
        timings["encode"] += (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        with counter.category("projector"):
            projected, _ = mlp2_forward(encoded.sequence, models.projector,
                                        counter)
        timings["project"] += (time.perf_counter() - t0) * 1e3

        spec, rel_mask = instruction_target(doc, instr_rng.derive(i).state)
        instr_emb = embed_instruction(models.ifm, spec)

        t0 = time.perf_counter()
        v_in = projected
        if models.ifm.use_positions and projected.shape[0]:
            v_in = projected + grid_positions(
                encoded.kept_indices, s4_side, config.llm_dim)
        fused_v, _ = fuse(models.ifm, v_in, instr_emb, counter)
        result = filter_tokens(models.ifm, fused_v, v_orig=projected,
                               eps=config.eps_i, counter=counter)
        timings["ifm"] += (time.perf_counter() - t0) * 1e3

        seq_len = result.kept_indices.size + len(spec)
        with counter.category("decoder_stub"):
            counter.add(config.decoder_flops_per_token_sq * seq_len * seq_len)

        if stage_agg is None:
            stage_agg = [{"stage": e.stage, "n_tokens_per_doc": e.n_tokens,
                          "active_total": 0, "windows_total": 0,
                          "windows_computed": 0, "windows_bypassed": 0,
                          "attn_flops": 0} for e in encoded.trace]
        for agg, e in zip(stage_agg, encoded.trace):
            agg["active_total"] += e.active
            agg["windows_total"] += e.windows_total
            agg["windows_computed"] += e.windows_computed
            agg["windows_bypassed"] += e.windows_bypassed
            agg["attn_flops"] += e.attn_flops

        ifm_mask = np.zeros(encoded.grid.n_tokens)
        kept_global = (encoded.kept_indices[result.kept_indices]
                       if result.kept_indices.size else
                       np.empty(0, dtype=int))
        ifm_mask[kept_global] = 1.0
        per_doc.append({
            "index": i,
            "seed": doc.seed,
            "kept_final": encoded.kept_final,
            "kept_after_ifm": int(result.kept_indices.size),
            "instruction_len": len(spec),
            "sequence_len": int(seq_len),
            "masks": {
                "stage2": _mask_hex(encoded.trace[1].binarized),
                "stage4": _mask_hex(encoded.trace[3].binarized),
                "ifm": _mask_hex(ifm_mask),
            },
        })
        post_encoder_total += encoded.kept_final
        post_ifm_total += int(result.kept_indices.size)
        instr_total += len(spec)
        max_sequence = max(max_sequence, int(seq_len))
        if return_artifacts:
            final_tokens = result.kept_tokens
            artifacts.append(DocArtifacts(
                doc=doc, probs=probs, encoded=encoded, projected=projected,
                instruction=spec, filter_result=result,
                final_tokens=final_tokens))

    n = len(corpus)
    initial_total = n * config.grid_side ** 2
    report = RunReport(
        schema_version=SCHEMA_VERSION,
        config={k: getattr(config, k) for k in PipelineConfig.KEYS},
        corpus={
            "n_docs": n,
            "image_size": config.image_size,
            "patch_size": config.patch_size,
            "mean_content_fraction": mean_content_fraction(corpus),
            "mean_patch_fraction": mean_content_fraction(
                corpus, config.patch_size),
        },
        stages=stage_agg,
        tokens={
            "initial": initial_total,
            "post_encoder": post_encoder_total,
            "post_ifm": post_ifm_total,
            "instruction": instr_total,
            "final_sequence": post_ifm_total + instr_total,
        },
        flops={
            "by_category": {k: counter.get(k) for k in FLOP_CATEGORIES},
            "total": counter.total(),
        },
        context={
            "budget": config.context_budget,
            "max_sequence": max_sequence,
            "fit": bool(max_sequence <= config.context_budget),
        },
        per_doc=per_doc,
        timings_ms={k: round(v, 3) for k, v in timings.items()},
    )
    if return_artifacts:
        return report, artifacts
    return report


def write_report(report: RunReport, out_dir) -> Path:
    """Canonical report.json plus the timings sidecar; returns report path."""
    out = imageio.ensure_dir(out_dir)
    path = out / "report.json"
    path.write_text(report.to_json())
    (out / "timings.json").write_text(
        json.dumps(report.timings_ms, sort_keys=True, indent=2) + "\n")
    return path


def sweep_schedule(c: float, i: float) -> ThresholdSchedule:
    """Scale the default two-tier schedule by a base threshold c."""
    return ThresholdSchedule(eps_c=(c, c, min(2 * c, 1.0), min(2 * c, 1.0)),
                             eps_i=i)


def sweep(config: PipelineConfig, settings: list[tuple[float, float]],
          corpus: list[LabeledImage] | None = None,
          detector: DetectorModel | None = None,
          ifm: IfmModel | None = None,
          out_dir=None) -> tuple[list[RunReport], list[dict]]:
    """One run per (content, instruction) threshold setting, shared corpus.

    Raises RuntimeError if total compute ever increases along a single
    threshold axis; partial per-setting reports are written before the
    check so a violation leaves evidence behind.
    """
    if not settings:
        raise ConfigError("sweep needs at least one (eps_c, eps_i) setting")
    if corpus is None:
        corpus = make_corpus(config.corpus_n, config.content_fraction,
                             config.image_size, config.seed)
    reports = []
    rows = []
    for c, i in settings:
        sched = sweep_schedule(c, i)
        cfg = PipelineConfig.from_dict({
            **{k: getattr(config, k) for k in PipelineConfig.KEYS},
            "eps_c": sched.eps_c, "eps_i": i,
        })
        rep = run(cfg, corpus=corpus, detector=detector, ifm=ifm)
        reports.append(rep)
        rows.append({
            "eps_c": c,
            "eps_i": i,
            "total_flops": rep.flops["total"],
            "encoder_attention_flops": rep.flops["by_category"]["encoder_attention"],
            "decoder_flops": rep.flops["by_category"]["decoder_stub"],
            "kept_final": rep.tokens["post_encoder"],
            "post_ifm": rep.tokens["post_ifm"],
        })
        if out_dir is not None:
            write_report(rep, Path(out_dir) / f"run_c{c:g}_i{i:g}")
    if out_dir is not None:
        write_summary_csv(rows, Path(out_dir) / "summary.csv")
    _check_monotone(rows)
    return reports, rows


def _check_monotone(rows: list[dict]) -> None:
    for a in rows:
        for b in rows:
            if a["eps_c"] <= b["eps_c"] and a["eps_i"] <= b["eps_i"]:
                if a["total_flops"] < b["total_flops"]:
                    raise RuntimeError(
                        "compute increased along a threshold axis: "
                        f"({a['eps_c']},{a['eps_i']})={a['total_flops']} < "
                        f"({b['eps_c']},{b['eps_i']})={b['total_flops']}")


SUMMARY_FIELDS = ("eps_c", "eps_i", "total_flops", "encoder_attention_flops",
                  "decoder_flops", "kept_final", "post_ifm")


def write_summary_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    imageio.ensure_dir(path.parent)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return path


def prepare_ifm_samples(config: PipelineConfig, corpus: list[LabeledImage],
                        models: Models | None = None
                        ) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Instruction-filter training samples: (visual tokens, instruction
    embedding, relevance labels), one triple per document.

    Visual tokens are the projected post-encoder tokens (with grid position
    encodings when enabled), exactly what the filter sees during a run.
    A token counts as relevant when its stage-4 cell overlaps the
    instruction target's dilated bbox.
    """
    if models is None:
        models = build_models(config)
    sched = config.schedule()
    cell_px = config.patch_size * 8
    instr_rng = Rng(config.seed).derive("instructions")
    samples = []
    for i, doc in enumerate(corpus):
        grid = partition(doc.image, models.embed)
        probs = detect(models.detector, doc)
        encoded = encode(models.encoder, grid, probs, sched,
                         gated=config.gated, bypass=config.bypass,
                         soft=config.soft_gating)
        projected, _ = mlp2_forward(encoded.sequence, models.projector)
        v_in = projected
        if models.ifm.use_positions and projected.shape[0]:
            v_in = projected + grid_positions(
                encoded.kept_indices, config.stage4_side, config.llm_dim)
        spec, rel_mask = instruction_target(doc, instr_rng.derive(i).state)
        cells = patchify_any(rel_mask, cell_px).ravel()
        labels = cells[encoded.kept_indices].astype(np.float64)
        samples.append((v_in, embed_instruction(models.ifm, spec), labels))
    return samples


def render_masks(report: RunReport | dict, out_dir,
                 doc_index: int | None = None) -> list[Path]:
    """PBM mask per pruning stage (white = kept) at native grid resolution."""
    rep = report.to_canonical() if isinstance(report, RunReport) else report
    grid = rep["config"]["image_size"] // rep["config"]["patch_size"]
    sides = {"stage2": grid // 2, "stage4": grid // 8, "ifm": grid // 8}
    out = imageio.ensure_dir(out_dir)
    docs = rep["per_doc"] if doc_index is None else [rep["per_doc"][doc_index]]
    written = []
    for doc in docs:
        for name, side in sides.items():
            kept = mask_from_hex(doc["masks"][name], side)
            path = out / f"doc_{doc['index']:04d}_{name}.pbm"
            imageio.write_pbm(path, ~kept)
            written.append(path)
    return written
