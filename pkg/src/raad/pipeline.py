"""Stage orchestration over on-disk artifacts.

Each command reads its prerequisites from the output directory and writes
its own artifacts atomically, so reruns are idempotent and interrupted
runs never leave half-written files.  Stage products:

    data/                       synthetic benchmark (gen-data)
    checkpoints/teacher.ckpt    pretrained teacher (pretrain)
    checkpoints/stage1.ckpt     jointly trained trio (train)
    reports/layer_scores.csv    bit allocation (score-layers)
    checkpoints/quantized.ckpt  snapped weights + schemes (quantize)
    checkpoints/stage3.ckpt     recalibrated trio (finetune)
    reports/eval.csv            metric rows per stage (eval)
    heatmaps/                   PGM heatmaps + PPM overlays (heatmaps)

Everything is a pure function of (config, seed), so two runs with the
same inputs produce byte-identical artifacts.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig, TrainSection, config_hash
from .data import Dataset, DefectSpec, SceneSpec, generate_dataset, load_dataset
from .errors import ConfigError, PipelineOrderError
from .maps import AnomalyMap, bias_mass, model_maps
from .metrics import EvalReport, ScoredSample, au_pro, auroc, average_precision, format_eval_rows
from .networks import Network, build_autoencoder, build_extractor, build_pdn, encoder_conv_indices
from .ppm import from_unit_float, write_pgm, write_ppm
from .quantization import (QuantScheme, build_pair_calibration, build_uniform_calibration,
                           format_quant_report, quantize_network, select_calibration_images)
from .rng import derive
from .scoring import BitPolicy, format_score_report, score_network_pair
from .training import TrainConfig, pretrain_teacher, train

STAGES = ("baseline", "quant", "raad")


def worker_count() -> int:
    raw = os.environ.get("RAAD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RAAD_THREADS must be an integer, got '{raw}'")
    return max(1, n)


class Paths:
    def __init__(self, out_dir: str):
        self.root = out_dir
        self.data = os.path.join(out_dir, "data")
        self.checkpoints = os.path.join(out_dir, "checkpoints")
        self.reports = os.path.join(out_dir, "reports")
        self.heatmaps = os.path.join(out_dir, "heatmaps")
        self.teacher_ckpt = os.path.join(self.checkpoints, "teacher.ckpt")
        self.stage1_ckpt = os.path.join(self.checkpoints, "stage1.ckpt")
        self.quant_ckpt = os.path.join(self.checkpoints, "quantized.ckpt")
        self.stage3_ckpt = os.path.join(self.checkpoints, "stage3.ckpt")
        self.scores_csv = os.path.join(self.reports, "layer_scores.csv")
        self.quant_csv = os.path.join(self.reports, "quantization.csv")
        self.eval_csv = os.path.join(self.reports, "eval.csv")

    def ensure(self):
        for d in (self.root, self.checkpoints, self.reports, self.heatmaps):
            os.makedirs(d, exist_ok=True)
        return self


def _atomic_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_meta(ckpt_path: str, meta: dict) -> None:
    _atomic_text(ckpt_path + ".meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_meta(ckpt_path: str) -> dict:
    with open(ckpt_path + ".meta.json") as fh:
        return json.load(fh)


def _require(path: str, produced_by: str) -> None:
    if not os.path.exists(path):
        raise PipelineOrderError(f"missing '{path}'; run '{produced_by}' first")


# ---------------------------------------------------------------- builders


def build_models(cfg: PipelineConfig, seed: int) -> tuple[Network, Network, Network, Network]:
    m = cfg.model
    teacher = build_pdn("teacher", seed=derive(seed, 1), out_channels=m.teacher_channels,
                        hidden_channels=m.hidden_channels)
    student = build_pdn("student", seed=derive(seed, 2), out_channels=m.teacher_channels,
                        width_multiplier=2, hidden_channels=m.hidden_channels)
    autoencoder = build_autoencoder("autoencoder", seed=derive(seed, 3),
                                    out_channels=m.teacher_channels,
                                    latent_dim=m.latent_dim,
                                    image_size=cfg.data.image_size,
                                    hidden_channels=m.ae_hidden_channels)
    extractor = build_extractor("extractor", seed=derive(seed, 4),
                                out_channels=m.teacher_channels,
                                hidden_channels=m.hidden_channels)
    return teacher, student, autoencoder, extractor


def _train_config(section: TrainSection, seed: int, key: int) -> TrainConfig:
    return TrainConfig(lambda_ts=section.lambda_ts, lambda_aes=section.lambda_aes,
                       lambda_tae=section.lambda_tae, lr=section.lr,
                       iterations=section.iterations, batch=section.batch,
                       hard_fraction=section.hard_fraction, seed=derive(seed, key))


def _trio_state(teacher: Network, student: Network, autoencoder: Network) -> dict:
    out = {}
    for net in (teacher, student, autoencoder):
        for k, v in net.state().items():
            out[f"{net.name}/{k}"] = v
    return out


def _load_trio(state: dict, teacher: Network, student: Network, autoencoder: Network) -> None:
    for net in (teacher, student, autoencoder):
        prefix = net.name + "/"
        net.load_state({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: PipelineConfig, out_dir: str, seed: int) -> str:
    paths = Paths(out_dir).ensure()
    d = cfg.data
    spec = SceneSpec(image_size=d.image_size, object_radius=d.object_radius,
                     background_amplitude=d.background_amplitude,
                     variance_factor=d.variance_factor)
    defect = DefectSpec(kinds=tuple(d.defect_kinds), size_min=d.defect_size_min,
                        size_max=d.defect_size_max)
    generate_dataset(paths.data, seed=seed, spec=spec, defect=defect,
                     n_train=d.n_train, n_test_normal=d.n_test_normal,
                     n_test_anom=d.n_test_anom)
    return paths.data


def cmd_pretrain(cfg: PipelineConfig, out_dir: str, seed: int) -> str:
    paths = Paths(out_dir).ensure()
    _require(os.path.join(paths.data, "manifest.txt"), "gen-data")
    ds = load_dataset(paths.data)
    teacher, _, _, extractor = build_models(cfg, seed)
    pcfg = TrainConfig(lr=cfg.pretrain.lr, iterations=cfg.pretrain.iterations,
                       seed=derive(seed, 10))
    pretrain_teacher(teacher, extractor, ds.train_images, pcfg,
                     log_path=os.path.join(paths.reports, "loss_pretrain.csv"))
    save_checkpoint(paths.teacher_ckpt, {f"teacher/{k}": v for k, v in teacher.state().items()})
    _write_meta(paths.teacher_ckpt, {"stage": "pretrain", "seed": seed,
                                     "config": config_hash(cfg)})
    s = cfg.data.image_size
    _atomic_text(os.path.join(paths.reports, "arch_teacher.txt"), teacher.summary(3, s, s))
    return paths.teacher_ckpt


def cmd_train(cfg: PipelineConfig, out_dir: str, seed: int) -> str:
    paths = Paths(out_dir).ensure()
    _require(paths.teacher_ckpt, "pretrain")
    ds = load_dataset(paths.data)
    teacher, student, autoencoder, _ = build_models(cfg, seed)
    ckpt = load_checkpoint(paths.teacher_ckpt)
    teacher.load_state({k.split("/", 1)[1]: v for k, v in ckpt.items()})
    teacher.freeze()
    tcfg = _train_config(cfg.train, seed, 11)
    train(teacher, student, autoencoder, ds.train_images, tcfg, labels=ds.train_labels,
          log_path=os.path.join(paths.reports, "loss_train.csv"))
    save_checkpoint(paths.stage1_ckpt, _trio_state(teacher, student, autoencoder))
    _write_meta(paths.stage1_ckpt, {"stage": "baseline", "seed": seed,
                                    "config": config_hash(cfg)})
    s = cfg.data.image_size
    _atomic_text(os.path.join(paths.reports, "arch_student.txt"), student.summary(3, s, s))
    _atomic_text(os.path.join(paths.reports, "arch_autoencoder.txt"),
                 autoencoder.summary(3, s, s))
    return paths.stage1_ckpt


def _load_stage1(cfg: PipelineConfig, paths: Paths, seed: int):
    teacher, student, autoencoder, _ = build_models(cfg, seed)
    state = load_checkpoint(paths.stage1_ckpt)
    _load_trio(state, teacher, student, autoencoder)
    teacher.freeze()
    return teacher, student, autoencoder


def _calibration_images(cfg: PipelineConfig, ds: Dataset, seed: int) -> list[np.ndarray]:
    return select_calibration_images(ds.train_images, cfg.quantization.calibration_size,
                                     derive(seed, 12))


def cmd_score_layers(cfg: PipelineConfig, out_dir: str, seed: int) -> str:
    paths = Paths(out_dir).ensure()
    _require(paths.stage1_ckpt, "train")
    ds = load_dataset(paths.data)
    teacher, student, _ = _load_stage1(cfg, paths, seed)
    calib = _calibration_images(cfg, ds, seed)
    policy = BitPolicy(thresholds=tuple(cfg.hqs.thresholds),
                       forced_layers=frozenset({1, teacher.n_convs}))
    scores = score_network_pair(teacher, student, calib, policy)
    _atomic_text(paths.scores_csv, format_score_report(scores))
    return paths.scores_csv


def _read_bits(paths: Paths) -> list[int]:
    with open(paths.scores_csv) as fh:
        lines = fh.read().strip().splitlines()
    return [int(ln.split(",")[3]) for ln in lines[1:]]


def cmd_quantize(cfg: PipelineConfig, out_dir: str, seed: int) -> str:
    paths = Paths(out_dir).ensure()
    _require(paths.stage1_ckpt, "train")
    _require(paths.scores_csv, "score-layers")
    ds = load_dataset(paths.data)
    teacher, student, autoencoder = _load_stage1(cfg, paths, seed)
    calib = _calibration_images(cfg, ds, seed)
    bits = _read_bits(paths)

    t_cal, s_cal = build_pair_calibration(teacher, student, calib)
    a_cal = build_uniform_calibration(autoencoder, calib)
    sweeps = cfg.quantization.sweeps
    q_teacher, t_rows, t_schemes = quantize_network(teacher, t_cal, bits, sweeps=sweeps)
    q_student, s_rows, s_schemes = quantize_network(student, s_cal, bits, sweeps=sweeps)
    ae_bits = [8] * autoencoder.n_convs
    q_ae, a_rows, a_schemes = quantize_network(
        autoencoder, a_cal, ae_bits,
        act_layers=encoder_conv_indices(autoencoder), sweeps=sweeps)

    save_checkpoint(paths.quant_ckpt, _trio_state(q_teacher, q_student, q_ae))
    meta = {"stage": "quant", "seed": seed, "config": config_hash(cfg),
            "bits": bits,
            "act_schemes": {net: [_scheme_dict(s) for s in schemes]
                            for net, schemes in (("teacher", t_schemes),
                                                 ("student", s_schemes),
                                                 ("autoencoder", a_schemes))}}
    _write_meta(paths.quant_ckpt, meta)
    report = "\n".join(["# teacher", format_quant_report(t_rows).rstrip(),
                        "# student", format_quant_report(s_rows).rstrip(),
                        "# autoencoder", format_quant_report(a_rows).rstrip()]) + "\n"
    _atomic_text(paths.quant_csv, report)
    return paths.quant_ckpt


def _scheme_dict(s: QuantScheme | None) -> dict | None:
    if s is None:
        return None
    return {"bits": s.bits, "scale": float(np.asarray(s.scale).reshape(())),
            "zero_point": int(np.asarray(s.zero_point).reshape(())),
            "granularity": s.granularity, "target": s.target}


def _scheme_from_dict(d: dict | None) -> QuantScheme | None:
    if d is None:
        return None
    return QuantScheme(bits=d["bits"], scale=d["scale"], zero_point=d["zero_point"],
                       granularity=d["granularity"], target=d["target"])


def _load_quantized(cfg: PipelineConfig, paths: Paths, seed: int):
    teacher, student, autoencoder, _ = build_models(cfg, seed)
    state = load_checkpoint(paths.quant_ckpt)
    _load_trio(state, teacher, student, autoencoder)
    teacher.freeze()
    meta = _read_meta(paths.quant_ckpt)
    for net in (teacher, student, autoencoder):
        schemes = [_scheme_from_dict(d) for d in meta["act_schemes"][net.name]]
        net.act_transforms = {j: s.apply for j, s in enumerate(schemes) if s is not None}
    return teacher, student, autoencoder


def cmd_finetune(cfg: PipelineConfig, out_dir: str, seed: int) -> str:
    paths = Paths(out_dir).ensure()
    _require(paths.quant_ckpt, "quantize")
    ds = load_dataset(paths.data)
    # snapped weights restored to full precision; no activation fake-quant
    teacher, student, autoencoder, _ = build_models(cfg, seed)
    state = load_checkpoint(paths.quant_ckpt)
    _load_trio(state, teacher, student, autoencoder)
    teacher.freeze()
    fcfg = _train_config(cfg.finetune_resolved(), seed, 13)
    train(teacher, student, autoencoder, ds.train_images, fcfg, labels=ds.train_labels,
          log_path=os.path.join(paths.reports, "loss_finetune.csv"))
    save_checkpoint(paths.stage3_ckpt, _trio_state(teacher, student, autoencoder))
    _write_meta(paths.stage3_ckpt, {"stage": "raad", "seed": seed,
                                    "config": config_hash(cfg)})
    return paths.stage3_ckpt


def _stage_models(cfg: PipelineConfig, paths: Paths, seed: int, stage: str):
    if stage == "baseline":
        _require(paths.stage1_ckpt, "train")
        return _load_stage1(cfg, paths, seed)
    if stage == "quant":
        _require(paths.quant_ckpt, "quantize")
        return _load_quantized(cfg, paths, seed)
    if stage == "raad":
        _require(paths.stage3_ckpt, "finetune")
        teacher, student, autoencoder, _ = build_models(cfg, seed)
        _load_trio(load_checkpoint(paths.stage3_ckpt), teacher, student, autoencoder)
        teacher.freeze()
        return teacher, student, autoencoder
    raise ConfigError(f"unknown stage '{stage}' (choose from {STAGES})")


def stage_maps(cfg: PipelineConfig, paths: Paths, seed: int, stage: str,
               images: list[np.ndarray]) -> list[AnomalyMap]:
    teacher, student, autoencoder = _stage_models(cfg, paths, seed, stage)
    threads = worker_count()
    if threads == 1:
        return [model_maps(teacher, student, autoencoder, im) for im in images]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda im: model_maps(teacher, student, autoencoder, im), images))


def evaluate_stage(cfg: PipelineConfig, paths: Paths, seed: int, stage: str,
                   ds: Dataset) -> EvalReport:
    maps = stage_maps(cfg, paths, seed, stage, ds.test_images)
    samples = [ScoredSample(score=m.image_score, label=lbl)
               for m, lbl in zip(maps, ds.test_labels)]
    normal_maps = [m for m, lbl in zip(maps, ds.test_labels) if lbl == "normal"]
    resized = [m.resized for m in maps]
    return EvalReport(
        stage=stage,
        auroc=auroc(samples),
        ap=average_precision(samples),
        aupro=au_pro(resized, ds.test_masks, fpr_limit=cfg.eval.fpr_limit),
        bias_mass=bias_mass(normal_maps, ds.variable_mask),
        n_normal=sum(1 for s in ds.test_labels if s == "normal"),
        n_anom=sum(1 for s in ds.test_labels if s == "anomalous"),
        seed=seed)


def cmd_eval(cfg: PipelineConfig, out_dir: str, seed: int,
             stages: list[str] | None = None) -> list[EvalReport]:
    paths = Paths(out_dir).ensure()
    ds = load_dataset(paths.data)
    rows = [evaluate_stage(cfg, paths, seed, st, ds) for st in (stages or list(STAGES))]
    _atomic_text(paths.eval_csv, format_eval_rows(rows))
    return rows


def cmd_heatmaps(cfg: PipelineConfig, out_dir: str, seed: int,
                 stages: list[str] | None = None) -> list[str]:
    paths = Paths(out_dir).ensure()
    ds = load_dataset(paths.data)
    written = []
    for stage in (stages or list(STAGES)):
        maps = stage_maps(cfg, paths, seed, stage, ds.test_images)
        for idx, (m, img) in enumerate(zip(maps, ds.test_images)):
            stem = f"test_{idx:04d}_{stage}"
            heat = m.resized
            span = heat.max() - heat.min()
            scaled = (heat - heat.min()) / span if span > 0 else np.zeros_like(heat)
            heat_u8 = np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
            pgm = os.path.join(paths.heatmaps, stem + ".pgm")
            write_pgm(pgm, heat_u8)
            rgb = from_unit_float(img).astype(np.float64)
            overlay = rgb * 0.5
            overlay[:, :, 0] += 0.5 * heat_u8
            write_ppm(os.path.join(paths.heatmaps, stem + ".ppm"),
                      np.clip(np.floor(overlay + 0.5), 0, 255).astype(np.uint8))
            written.append(pgm)
    return written


def run_all(cfg: PipelineConfig, out_dir: str, seed: int) -> list[EvalReport]:
    """gen-data through eval in order; convenience for tests and scripts."""
    cmd_gen_data(cfg, out_dir, seed)
    cmd_pretrain(cfg, out_dir, seed)
    cmd_train(cfg, out_dir, seed)
    cmd_score_layers(cfg, out_dir, seed)
    cmd_quantize(cfg, out_dir, seed)
    cmd_finetune(cfg, out_dir, seed)
    rows = cmd_eval(cfg, out_dir, seed)
    cmd_heatmaps(cfg, out_dir, seed)
    return rows
