"""Command-line surface tying the modules into pipelines.

Every subcommand consumes one TOML config (plus ``--set section.key=value``
overrides and a few dedicated flags), writes its artifacts under ``--out``,
and finishes by writing a ``run_record.json`` with the resolved config
digest, the seeds used, and sha256 digests of inputs and outputs, so any
run can be replayed and checked end to end.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import classifier as clf
from . import codec as codec_mod
from . import conditioning as cond
from . import data as data_mod
from . import metrics as metrics_mod
from . import training as training_mod
from .config import ConfigError, load_config, resolved_digest
from .model import DermDiTConfig, init_model
from .schedule import build_schedule

__all__ = ["main"]


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract is 1
        raise UsageError(message)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _tree_digest(path: Path) -> str:
    if path.is_file():
        return ckpt.file_digest(path)
    lines = []
    for child in sorted(p for p in path.rglob("*") if p.is_file()):
        if child.name.startswith("run_record"):
            continue
        lines.append(f"{child.relative_to(path)}:{ckpt.file_digest(child)}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def _write_run_record(
    out_dir: Path,
    command: str,
    argv: list[str],
    config: dict,
    inputs: dict[str, Path],
    outputs: dict[str, Path],
    seeds: dict | None = None,
) -> None:
    record = {
        "command": command,
        "argv": argv,
        "config": config,
        "config_digest": resolved_digest(config),
        "seeds": seeds or {},
        "inputs": {k: _tree_digest(Path(v)) for k, v in inputs.items()},
        "outputs": {k: _tree_digest(Path(v)) for k, v in outputs.items()},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"run_record_{command}.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _codec_identity(config: dict) -> dict:
    c = config["codec"]
    return {k: c[k] for k in ("mode", "downsample_factor", "latent_channels")}


def _model_doc(config: dict) -> dict:
    """Architecture-defining slice of the config, used for checkpoint pairing.

    Runtime details (paths, step counts, endpoints) are deliberately
    excluded so a checkpoint stays loadable wherever its architecture
    matches.
    """
    c = config["conditioning"]
    return {
        "data": config["data"],
        "schedule": config["schedule"],
        "codec": _codec_identity(config),
        "conditioning": {k: c[k] for k in ("regime", "encoder", "d_text", "max_tokens")},
        "model": config["model"],
    }


def _codec_doc(config: dict) -> dict:
    return {"data": config["data"], "codec": _codec_identity(config)}


def _classifier_doc(config: dict) -> dict:
    return {k: config[k] for k in ("data", "classifier")}


def _latent_shape(config: dict) -> tuple:
    res = config["data"]["resolution"]
    if config["codec"]["mode"] == "identity":
        return (3, res, res)
    f = config["codec"]["downsample_factor"]
    return (config["codec"]["latent_channels"], res // f, res // f)


def _model_config(config: dict) -> DermDiTConfig:
    m = config["model"]
    c = config["conditioning"]
    return DermDiTConfig(
        latent_shape=_latent_shape(config),
        patch_size=m["patch_size"],
        d_model=m["d_model"],
        depth=m["depth"],
        heads=m["heads"],
        hidden_mult=m["hidden_mult"],
        learn_variance=m["learn_variance"],
        d_text=c["d_text"],
        max_tokens=c["max_tokens"],
    )


def _schedule(config: dict):
    s = config["schedule"]
    return build_schedule(s["kind"], s["timesteps"], s["beta_start"], s["beta_end"])


def _encoder(config: dict, sidecar_override: str | None = None):
    c = config["conditioning"]
    if c["encoder"] == "hash_stub":
        return cond.HashStubEncoder(d_text=c["d_text"], max_tokens=c["max_tokens"])
    if c["encoder"] == "external":
        sidecar = sidecar_override or c["sidecar"]
        if not sidecar:
            raise ConfigError("conditioning.encoder=external needs conditioning.sidecar")
        return cond.SidecarEncoder(sidecar)
    raise ConfigError(f"unknown text encoder {c['encoder']!r}")


def _codec(config: dict, codec_ckpt: str | None):
    c = config["codec"]
    if c["mode"] == "identity":
        return codec_mod.identity_codec()
    codec = codec_mod.init_conv_codec(
        latent_channels=c["latent_channels"],
        downsample_factor=c["downsample_factor"],
        seed=c["seed"],
    )
    if codec_ckpt:
        arrays = ckpt.load_checkpoint(codec_ckpt, expected_config=_codec_doc(config))
        codec.params.load_state_arrays(arrays)
    return codec


def _load_model(config: dict, checkpoint_path: str, use_ema: bool = False):
    model = init_model(_model_config(config), seed=config["model"]["init_seed"])
    arrays = ckpt.load_checkpoint(checkpoint_path, expected_config=_model_doc(config))
    model.params.load_state_arrays(arrays)
    if use_ema:
        for name, p in model.params.items():
            key = f"ema.{name}"
            if key not in arrays:
                raise ConfigError(f"checkpoint has no EMA weights ({key} missing)")
            model.params.set_data(name, arrays[key].astype(p.data.dtype))
    return model


def _load_image_set(path: str, resolution: int):
    """Load a directory or manifest into ([N,C,H,W], attribute dicts)."""
    p = Path(path)
    if p.is_file() and p.suffix == ".jsonl":
        manifest = data_mod.ingest_manifest(p)
        images = np.stack(
            [manifest.load_image(r, resolution) for r in manifest.records]
        )
        return images, [r.as_dict() for r in manifest.records]
    if p.is_dir():
        for name in ("manifest.jsonl", "manifest_captioned.jsonl"):
            if (p / name).exists():
                return _load_image_set(str(p / name), resolution)
        gen = p / "generated.jsonl"
        if gen.exists():
            entries = [json.loads(line) for line in gen.read_text().splitlines() if line]
            images = np.stack(
                [data_mod.load_image(p / e["image"], resolution) for e in entries]
            )
            attrs = [e.get("attributes") or {} for e in entries]
            return images, attrs
        pngs = sorted(p.rglob("*.png"))
        if pngs:
            images = np.stack([data_mod.load_image(f, resolution) for f in pngs])
            return images, [{} for _ in pngs]
    raise data_mod.ManifestError(f"no image set found at {path}")


def _extractor_features(config: dict, args, images: np.ndarray):
    res = config["data"]["resolution"]
    if args.extractor == "random":
        extractor = metrics_mod.RandomProjectionExtractor(
            input_shape=(3, res, res), dim=128, seed=config["eval"]["seed"]
        )
        return extractor.extract(images)
    if args.extractor == "fine-tuned":
        if not args.classifier:
            raise UsageError("--extractor fine-tuned needs --classifier CKPT")
        model = _load_classifier(config, args.classifier)
        return clf.extract_features(model, images)
    raise UsageError(f"unknown extractor {args.extractor!r}")


def _classifier_config(config: dict) -> clf.ClassifierConfig:
    c = config["classifier"]
    return clf.ClassifierConfig(
        batch_size=c["batch_size"], epochs=c["epochs"], lr=c["lr"], seed=c["seed"]
    )


def _load_classifier(config: dict, path: str) -> clf.ClassifierModel:
    model = clf.init_classifier(_classifier_config(config))
    arrays = ckpt.load_checkpoint(path, expected_config=_classifier_doc(config))
    model.params.load_state_arrays(arrays)
    return model


def _attrs_from_args(args) -> cond.AttributeSet | None:
    fields = {
        "diagnosis": args.diagnosis,
        "skin_tone": args.skin_tone,
        "sex": args.sex,
        "age": args.age,
        "site": args.site,
    }
    if all(v is None for v in fields.values()):
        return None
    if fields["diagnosis"] is None:
        raise UsageError("attribute sampling needs --diagnosis")
    return cond.AttributeSet(**fields)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_make_toy(args, config, argv) -> int:
    out = Path(args.out)
    bias = {}
    for spec_str in args.bias or []:
        attr, _, rest = spec_str.partition("=")
        props = {}
        for chunk in rest.split(","):
            value, _, weight = chunk.partition(":")
            props[value] = float(weight) if weight else 1.0
        bias[attr] = props
    manifest = data_mod.make_toy_benchmark(
        out, size=args.size, bias_spec=bias or None, seed=args.seed,
        resolution=config["data"]["resolution"],
    )
    _write_run_record(out, "make-toy", argv, config, {}, {"dataset": out},
                      seeds={"seed": args.seed})
    print(f"wrote {len(manifest)} images to {out}")
    return 0


def _cmd_caption(args, config, argv) -> int:
    if args.template and args.vlm_endpoint:
        raise UsageError("--template conflicts with --vlm-endpoint: pick one source")
    if not args.template and not args.vlm_endpoint:
        raise UsageError("caption needs --template or --vlm-endpoint")
    manifest = data_mod.ingest_manifest(args.manifest)
    regime = config["conditioning"]["regime"]
    if args.template:
        client = cond.TemplateClient()
    else:
        c = config["conditioning"]
        client = cond.VlmClient(
            endpoint=args.vlm_endpoint, model=c["vlm_model"],
            timeout=c["vlm_timeout"], retries=c["vlm_retries"],
            cache_dir=c["cache_dir"] or None,
        )
    new_records = []
    for record in manifest.records:
        attrs = cond.AttributeSet(
            diagnosis=record.diagnosis, skin_tone=record.skin_tone,
            sex=record.sex, age=record.age, site=record.site,
        )
        instruction = cond.render_instruction(attrs, regime)
        image_bytes = (
            manifest.image_path(record).read_bytes() if args.vlm_endpoint else b""
        )
        prompt = cond.generate_prompt(
            image_bytes, instruction, client, image_id=record.image, attributes=attrs
        )
        new_records.append(
            data_mod.ManifestRecord(**{**record.as_dict(), "prompt": prompt.prompt_text})
        )
    out_path = Path(args.manifest).parent / args.out_name
    data_mod.DatasetManifest(root=manifest.root, records=new_records).save(out_path)
    _write_run_record(out_path.parent, "caption", argv, config,
                      {"manifest": Path(args.manifest)}, {"captioned": out_path})
    print(f"wrote {out_path}")
    return 0


def _cmd_embed(args, config, argv) -> int:
    manifest = data_mod.ingest_manifest(args.manifest)
    c = config["conditioning"]
    encoder = cond.HashStubEncoder(d_text=c["d_text"], max_tokens=c["max_tokens"])
    source = training_mod.PromptSource(encoder, regime=c["regime"])
    records: dict[bytes, np.ndarray] = {}
    for record in manifest.records:
        prompt = source.prompt_for(record)
        digest = cond.prompt_digest(prompt)
        if digest not in records:
            records[digest] = encoder.encode(prompt).tokens
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sidecar = out / "embeddings.bin"
    cond.write_sidecar(sidecar, records)
    _write_run_record(out, "embed", argv, config,
                      {"manifest": Path(args.manifest)}, {"sidecar": sidecar})
    print(f"wrote {len(records)} prompt embeddings to {sidecar}")
    return 0


def _cmd_train_codec(args, config, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    c = config["codec"]
    manifest = data_mod.ingest_manifest(args.manifest)
    res = config["data"]["resolution"]
    if c["mode"] == "identity":
        codec = codec_mod.identity_codec()
    else:
        train_records = manifest.split("train")
        images = np.stack([manifest.load_image(r, res) for r in train_records])
        codec = codec_mod.train_autoencoder(
            images, mode="conv", latent_channels=c["latent_channels"],
            downsample_factor=c["downsample_factor"], steps=c["train_steps"],
            lr=c["lr"], seed=c["seed"], log_path=out / "codec_loss.csv",
        )
    path = out / "codec.ckpt"
    arrays = codec.params.state_arrays() if codec.params is not None else {}
    ckpt.save_checkpoint(path, arrays, _codec_doc(config))
    _write_run_record(out, "train-codec", argv, config,
                      {"manifest": Path(args.manifest)}, {"checkpoint": path},
                      seeds={"seed": c["seed"]})
    print(f"wrote {path}")
    return 0


def _cmd_train(args, config, argv) -> int:
    out = Path(args.out)
    manifest = data_mod.ingest_manifest(args.manifest)
    t = config["train"]
    codec = _codec(config, args.codec)
    model = init_model(_model_config(config), seed=config["model"]["init_seed"])
    unconditional = args.unconditional or t["unconditional"]
    if unconditional:
        source = None
    else:
        encoder = _encoder(config, args.sidecar)
        source = training_mod.PromptSource(encoder, regime=config["conditioning"]["regime"])
    train_config = training_mod.TrainConfig(
        batch_size=t["batch_size"], lr=t["lr"], total_steps=t["total_steps"],
        seed=t["seed"], checkpoint_every=t["checkpoint_every"],
        log_every=t["log_every"], ema=t["ema"], ema_decay=t["ema_decay"],
        blas_threads=t["blas_threads"],
    )
    final = training_mod.train(
        model, codec, manifest, source, train_config, _schedule(config), out,
        config_doc=_model_doc(config), resolution=config["data"]["resolution"],
        resume_from=args.resume,
    )
    inputs = {"manifest": Path(args.manifest)}
    if args.codec:
        inputs["codec"] = Path(args.codec)
    _write_run_record(out, "train", argv, config, inputs,
                      {"checkpoint": final, "loss_log": out / "loss_log.csv"},
                      seeds={"seed": t["seed"]})
    print(f"wrote {final}")
    return 0


def _cmd_sample(args, config, argv) -> int:
    out = Path(args.out)
    attrs = _attrs_from_args(args)
    given = [
        name for name, value in (
            ("--prompt", args.prompt),
            ("attribute flags", attrs),
            ("--plan", args.plan),
            ("--unconditional", args.unconditional or None),
        ) if value
    ]
    if len(given) > 1:
        raise UsageError(f"conflicting conditioning sources: {' and '.join(given)}")
    if not given:
        raise UsageError(
            "sample needs --prompt, attribute flags, --plan, or --unconditional"
        )

    model = _load_model(config, args.checkpoint, use_ema=args.ema)
    codec = _codec(config, args.codec)
    schedule = _schedule(config)
    encoder = None if args.unconditional else _encoder(config, args.sidecar)
    digest = ckpt.file_digest(args.checkpoint)
    regime = config["conditioning"]["regime"]
    steps = args.steps or config["sample"]["steps"]
    batch = config["sample"]["batch_size"]

    if args.plan:
        plan_doc = json.loads(Path(args.plan).read_text())
        for entry in plan_doc["entries"]:
            attrs_i = cond.AttributeSet(**entry["attributes"])
            training_mod.generate(
                model, codec, attrs_i, entry["count"],
                seed=args.seed + entry["seed_base"], schedule=schedule, steps=steps,
                text_encoder=encoder, regime=regime, out_dir=out,
                checkpoint_digest=digest, batch_size=batch,
            )
        n_total = plan_doc["total"]
    else:
        conditioning = None if args.unconditional else (args.prompt or attrs)
        training_mod.generate(
            model, codec, conditioning, args.n, seed=args.seed, schedule=schedule,
            steps=steps, text_encoder=encoder, regime=regime, out_dir=out,
            checkpoint_digest=digest, batch_size=batch,
        )
        n_total = args.n
    inputs = {"checkpoint": Path(args.checkpoint)}
    if args.plan:
        inputs["plan"] = Path(args.plan)
    _write_run_record(out, "sample", argv, config, inputs, {"generated": out},
                      seeds={"seed": args.seed, "steps": steps})
    print(f"wrote {n_total} samples to {out}")
    return 0


def _cmd_plan_balance(args, config, argv) -> int:
    domains: dict[str, list] = {}
    raw = args.domains or "diagnosis=benign,malignant;skin_tone=light,brown,dark"
    for part in raw.split(";"):
        attr, _, values = part.partition("=")
        domains[attr.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    plan = training_mod.plan_balanced_generation(domains, args.total, base_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "total": plan.total,
        "entries": [
            {"attributes": attrs.as_dict(), "count": count, "seed_base": seed_base}
            for attrs, count, seed_base in plan.entries
        ],
    }
    path = out / "plan.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_run_record(out, "plan-balance", argv, config, {}, {"plan": path},
                      seeds={"seed": args.seed})
    print(f"wrote {path}")
    return 0


def _cmd_eval_fid(args, config, argv) -> int:
    res = config["data"]["resolution"]
    real, _ = _load_image_set(args.real, res)
    synth, _ = _load_image_set(args.synth, res)
    real_features = _extractor_features(config, args, real)
    synth_features = _extractor_features(config, args, synth)
    report = metrics_mod.fid(real_features, synth_features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_metric_report(out / "fid.json", report, resolved_digest(config))
    _write_run_record(out, "eval-fid", argv, config,
                      {"real": Path(args.real), "synth": Path(args.synth)},
                      {"report": out / "fid.json"})
    print(json.dumps(report))
    return 0


def _cmd_eval_diversity(args, config, argv) -> int:
    res = config["data"]["resolution"]
    images, _ = _load_image_set(args.images, res)
    report = metrics_mod.diversity_msssim(
        images, n_pairs=config["eval"]["n_pairs"], seed=config["eval"]["seed"]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_metric_report(out / "diversity.json", report, resolved_digest(config))
    _write_run_record(out, "eval-diversity", argv, config,
                      {"images": Path(args.images)}, {"report": out / "diversity.json"})
    print(json.dumps(report))
    return 0


def _sampled_features(config, args, path: str, label: str, rng):
    res = config["data"]["resolution"]
    images, _ = _load_image_set(path, res)
    cap = config["eval"]["pca_sample"]
    if len(images) > cap:
        images = images[rng.choice(len(images), size=cap, replace=False)]
    return _extractor_features(config, args, images), label


def _cmd_eval_pca(args, config, argv) -> int:
    rng = np.random.default_rng(config["eval"]["seed"])
    (real_features, _), (synth_features, _) = (
        _sampled_features(config, args, args.real, "real", rng),
        _sampled_features(config, args, args.synth, "synthetic", rng),
    )
    combined = metrics_mod.FeatureSet(
        embeddings=np.concatenate([real_features.embeddings, synth_features.embeddings]),
        extractor_id=real_features.extractor_id,
    )
    projections, ratios = metrics_mod.pca_project(combined, k=config["eval"]["pca_k"])
    labels = ["real"] * real_features.n + ["synthetic"] * synth_features.n
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pca.csv", "w") as fh:
        fh.write("pc1,pc2,label\n")
        for row, label in zip(projections, labels):
            fh.write(f"{row[0]:.6f},{row[1]:.6f},{label}\n")
    report = {
        "metric": "pca",
        "explained_variance_ratios": [float(r) for r in ratios],
        "n_real": real_features.n,
        "n_synth": synth_features.n,
        "extractor_id": combined.extractor_id,
        "seed": config["eval"]["seed"],
    }
    metrics_mod.write_metric_report(out / "pca.json", report, resolved_digest(config))
    _write_run_record(out, "eval-pca", argv, config,
                      {"real": Path(args.real), "synth": Path(args.synth)},
                      {"csv": out / "pca.csv", "report": out / "pca.json"})
    print(json.dumps(report))
    return 0


def _cmd_eval_density(args, config, argv) -> int:
    rng = np.random.default_rng(config["eval"]["seed"])
    (real_features, _), (synth_features, _) = (
        _sampled_features(config, args, args.real, "real", rng),
        _sampled_features(config, args, args.synth, "synthetic", rng),
    )
    combined = metrics_mod.FeatureSet(
        embeddings=np.concatenate([real_features.embeddings, synth_features.embeddings]),
        extractor_id=real_features.extractor_id,
    )
    projections, _ = metrics_mod.pca_project(combined, k=max(config["eval"]["pca_k"], 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    report = {"metric": "density_pc1", "extractor_id": combined.extractor_id}
    for label, lo, hi in (
        ("real", 0, real_features.n),
        ("synthetic", real_features.n, real_features.n + synth_features.n),
    ):
        table = metrics_mod.density_export(projections[lo:hi, 0])
        path = out / f"density_{label}.csv"
        with open(path, "w") as fh:
            fh.write("coordinate,density\n")
            for c, d in zip(table["grid"], table["density"]):
                fh.write(f"{c:.6f},{d:.8f}\n")
        outputs[label] = path
        report[f"{label}_bandwidth"] = table["bandwidth"]
        report[f"{label}_degenerate"] = table["degenerate"]
    metrics_mod.write_metric_report(out / "density.json", report, resolved_digest(config))
    outputs["report"] = out / "density.json"
    _write_run_record(out, "eval-density", argv, config,
                      {"real": Path(args.real), "synth": Path(args.synth)}, outputs)
    print(json.dumps(report))
    return 0


def _synthetic_train_manifest(
    base: data_mod.DatasetManifest, synth_dir: Path
) -> data_mod.DatasetManifest:
    """Replace the train split with records from a generated set."""
    gen = synth_dir / "generated.jsonl"
    if not gen.exists():
        raise data_mod.ManifestError(f"{synth_dir} has no generated.jsonl")
    records = [r for r in base.records if r.split != "train"]
    for line in gen.read_text().splitlines():
        if not line:
            continue
        entry = json.loads(line)
        attrs = entry.get("attributes") or {}
        if "diagnosis" not in attrs:
            raise data_mod.ManifestError(
                "generated set lacks diagnosis attributes; cannot train on it"
            )
        records.append(
            data_mod.ManifestRecord(
                image=str((synth_dir / entry["image"]).resolve()),
                diagnosis=attrs["diagnosis"],
                skin_tone=attrs.get("skin_tone"),
                sex=attrs.get("sex"),
                age=attrs.get("age"),
                site=attrs.get("site"),
                split="train",
            )
        )
    return data_mod.DatasetManifest(root=Path("/"), records=records)


def _cmd_train_classifier(args, config, argv) -> int:
    manifest = data_mod.ingest_manifest(args.manifest)
    if args.synthetic:
        manifest = _synthetic_train_manifest(manifest, Path(args.synthetic))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = clf.train_classifier(
        manifest, _classifier_config(config),
        resolution=config["data"]["resolution"],
        log_path=out / "classifier_log.csv",
    )
    path = out / "classifier.ckpt"
    ckpt.save_checkpoint(path, model.params.state_arrays(), _classifier_doc(config))
    inputs = {"manifest": Path(args.manifest)}
    if args.synthetic:
        inputs["synthetic"] = Path(args.synthetic)
    _write_run_record(out, "train-classifier", argv, config, inputs,
                      {"checkpoint": path},
                      seeds={"seed": config["classifier"]["seed"]})
    print(f"wrote {path}")
    return 0


def _cmd_eval_classifier(args, config, argv) -> int:
    manifest = data_mod.ingest_manifest(args.manifest)
    model = _load_classifier(config, args.classifier)
    group_by = args.group_by.split(",") if args.group_by else []
    results = clf.evaluate_by_subgroup(
        model, manifest, group_by, split=args.split,
        resolution=config["data"]["resolution"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in results:
        rows.append({
            "test_data": args.test_label,
            "training_data": args.train_label,
            "subgroup": ",".join(f"{k}={v}" for k, v in r.subgroup.items()) or "overall",
            "support": r.support,
            "auc": r.auc,
            "recall": r.recall,
            "f1": r.f1,
            "flags": list(r.flags),
        })
    def fmt(value) -> str:
        return "" if value is None else f"{value:.4f}"

    with open(out / "subgroup_metrics.csv", "w") as fh:
        fh.write("test_data,training_data,subgroup,support,auc,recall,f1\n")
        for row in rows:
            fh.write(
                f"{row['test_data']},{row['training_data']},{row['subgroup']},"
                f"{row['support']},{fmt(row['auc'])},{fmt(row['recall'])},"
                f"{fmt(row['f1'])}\n"
            )
    metrics_mod.write_metric_report(
        out / "subgroup_metrics.json",
        {"metric": "subgroup_classification", "rows": rows},
        resolved_digest(config),
    )
    _write_run_record(out, "eval-classifier", argv, config,
                      {"manifest": Path(args.manifest), "classifier": Path(args.classifier)},
                      {"csv": out / "subgroup_metrics.csv",
                       "report": out / "subgroup_metrics.json"})
    print(json.dumps({"rows": rows}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="dermdit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config value")

    p = sub.add_parser("make-toy", help="generate the procedural toy benchmark")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bias", action="append", default=[],
                   metavar="ATTR=V1:P1,V2:P2", help="subgroup proportions")
    p.set_defaults(func=_cmd_make_toy)

    p = sub.add_parser("caption", help="attach prompts to a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--template", action="store_true",
                   help="use the offline template rewriter")
    p.add_argument("--vlm-endpoint", default=None,
                   help="chat-completions-style captioning endpoint")
    p.add_argument("--out-name", default="manifest_captioned.jsonl")
    p.set_defaults(func=_cmd_caption)

    p = sub.add_parser("embed", help="embed prompts into a sidecar file")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("train-codec", help="train (or materialize) the codec")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_codec)

    p = sub.add_parser("train", help="train the denoiser")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--codec", default=None, help="codec checkpoint (conv mode)")
    p.add_argument("--sidecar", default=None, help="embedding sidecar path")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--unconditional", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="generate images from a trained model")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--prompt", default=None)
    p.add_argument("--plan", default=None, help="balanced generation plan JSON")
    p.add_argument("--unconditional", action="store_true")
    p.add_argument("--diagnosis", default=None)
    p.add_argument("--skin-tone", dest="skin_tone", default=None)
    p.add_argument("--sex", default=None)
    p.add_argument("--age", type=int, default=None)
    p.add_argument("--site", default=None)
    p.add_argument("--codec", default=None)
    p.add_argument("--sidecar", default=None)
    p.add_argument("--ema", action="store_true", help="sample with EMA weights")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("plan-balance", help="write a balanced generation plan")
    common(p)
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domains", default=None,
                   metavar="A=V1,V2;B=V3,V4", help="attribute domains")
    p.set_defaults(func=_cmd_plan_balance)

    p = sub.add_parser("eval-fid", help="Frechet distance between image sets")
    common(p)
    p.add_argument("--real", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extractor", choices=("fine-tuned", "random"), default="fine-tuned")
    p.add_argument("--classifier", default=None)
    p.set_defaults(func=_cmd_eval_fid)

    p = sub.add_parser("eval-diversity", help="mean pairwise MS-SSIM")
    common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval_diversity)

    p = sub.add_parser("eval-pca", help="PCA projection export")
    common(p)
    p.add_argument("--real", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extractor", choices=("fine-tuned", "random"), default="random")
    p.add_argument("--classifier", default=None)
    p.set_defaults(func=_cmd_eval_pca)

    p = sub.add_parser("eval-density", help="PC1 kernel-density export")
    common(p)
    p.add_argument("--real", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extractor", choices=("fine-tuned", "random"), default="random")
    p.add_argument("--classifier", default=None)
    p.set_defaults(func=_cmd_eval_density)

    p = sub.add_parser("train-classifier", help="train the diagnostic classifier")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic", default=None,
                   help="generated-set dir replacing the train split")
    p.set_defaults(func=_cmd_train_classifier)

    p = sub.add_parser("eval-classifier", help="subgroup-stratified evaluation")
    common(p)
    p.add_argument("--classifier", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--group-by", dest="group_by", default="")
    p.add_argument("--split", default="test")
    p.add_argument("--test-label", default="toy")
    p.add_argument("--train-label", default="real")
    p.set_defaults(func=_cmd_eval_classifier)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config, args.overrides)
        return args.func(args, config, argv)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
