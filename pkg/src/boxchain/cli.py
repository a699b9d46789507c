"""Command-line entry points.

Subcommands: `layout` (ingest/cluster), `render` (s1/s2), `infer`,
`generate` (annotate/qa/enabling-tasks), `eval`, and `serve`. All randomness
flows through `--seed`; with the mock backend every command is reproducible.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from . import backend as backend_mod
from . import datagen, evaluation, orchestrator, store
from .config import PipelineConfig, load_config
from .errors import BoxchainError, ConfigError, InputFormatError, ParameterError
from .layout import OcrToken, BBox, cluster_ocr_tokens, load_layout, save_layout
from .render import RenderStyle, load_image, render_s1_overlay, render_s2_mask

logger = logging.getLogger(__name__)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except BoxchainError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


@click.group()
def main() -> None:
    """Select-then-answer document QA pipeline."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------


@main.group("layout")
def layout_group() -> None:
    """Produce layout interchange files."""


def _image_dims(image: str | None, image_id: str | None, width: int | None, height: int | None):
    if image:
        img = load_image(image)
        return Path(image).stem, img.size[0], img.size[1]
    if not (image_id and width and height):
        raise ConfigError("provide --image, or --image-id with --width and --height")
    return image_id, width, height


@layout_group.command("ingest")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--image", type=click.Path(exists=True), help="image the layout belongs to")
@click.option("--image-id", default=None)
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def layout_ingest(input_path, image, image_id, width, height, out) -> None:
    """Normalize an external analyzer file: clip, re-index in reading order."""
    image_id, width, height = _image_dims(image, image_id, width, height)
    layout = load_layout(input_path, image_id, width, height)
    save_layout(layout, out)
    click.echo(f"wrote {out} ({len(layout)} boxes)")


@layout_group.command("cluster")
@click.option("--tokens", "tokens_path", required=True, type=click.Path(exists=True))
@click.option("--image", type=click.Path(exists=True))
@click.option("--image-id", default=None)
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--k", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
@handle_errors
def layout_cluster(tokens_path, image, image_id, width, height, k, seed, out) -> None:
    """Cluster OCR tokens into layout boxes with seeded K-means."""
    image_id, width, height = _image_dims(image, image_id, width, height)
    try:
        payload = json.loads(Path(tokens_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"{tokens_path}: {exc}") from exc
    if not isinstance(payload, list):
        raise InputFormatError(f"{tokens_path}: expected a list of tokens")
    tokens = []
    for i, rec in enumerate(payload):
        try:
            x, y, w, h = rec["bbox"]
            tokens.append(
                OcrToken(
                    bbox=BBox(int(x), int(y), int(w), int(h)),
                    text=str(rec["text"]),
                    confidence=float(rec.get("confidence", 1.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputFormatError(f"{tokens_path}: token {i}: {exc}") from exc
    layout = cluster_ocr_tokens(tokens, image_id, width, height, k=k, seed=seed)
    save_layout(layout, out)
    click.echo(f"wrote {out} ({len(layout)} boxes from {len(tokens)} tokens)")


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


@main.group("render")
def render_group() -> None:
    """Render visual-prompt images."""


def _style(thickness, font_px, sigma) -> RenderStyle:
    return RenderStyle(border_thickness=thickness, label_font_px=font_px, blur_sigma=sigma)


@render_group.command("s1")
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--layout", "layout_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--thickness", type=int, default=None)
@click.option("--font-px", type=int, default=None)
@handle_errors
def render_s1(image, layout_path, out, thickness, font_px) -> None:
    """Indexed overlay: every box outlined and tagged with its id."""
    img = load_image(image)
    layout = load_layout(layout_path, Path(image).stem, *img.size)
    prompted = render_s1_overlay(img, layout, _style(thickness, font_px, None))
    Path(out).write_bytes(prompted.image_bytes)
    click.echo(f"wrote {out}")


@render_group.command("s2")
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--layout", "layout_path", required=True, type=click.Path(exists=True))
@click.option("--keys", required=True, help="comma-separated key box ids, e.g. 3,5,6")
@click.option("--out", required=True, type=click.Path())
@click.option("--thickness", type=int, default=None)
@click.option("--sigma", type=float, default=None)
@handle_errors
def render_s2(image, layout_path, keys, out, thickness, sigma) -> None:
    """Blur-reverse mask: key boxes sharp and outlined, everything else blurred."""
    img = load_image(image)
    layout = load_layout(layout_path, Path(image).stem, *img.size)
    try:
        key_ids = [int(k) for k in keys.split(",") if k.strip()]
    except ValueError as exc:
        raise ParameterError(f"bad --keys value {keys!r}") from exc
    prompted = render_s2_mask(img, layout, key_ids, _style(thickness, None, sigma))
    Path(out).write_bytes(prompted.image_bytes)
    click.echo(f"wrote {out}")


# ---------------------------------------------------------------------------
# shared corpus plumbing
# ---------------------------------------------------------------------------


def _read_corpus(corpus_dir: str) -> dict:
    corpus = Path(corpus_dir)
    manifest_path = corpus / "corpus.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputFormatError(f"{manifest_path}: {exc}") from exc
    manifest["_root"] = corpus
    return manifest


def _corpus_questions(manifest: dict) -> list[dict]:
    root: Path = manifest["_root"]
    path = root / manifest.get("questions", "questions.jsonl")
    questions = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputFormatError(f"{path}:{ln}: {exc}") from exc
        questions.append(rec)
    if not questions:
        raise InputFormatError(f"{path}: no questions")
    return questions


def _corpus_image(manifest: dict, image_id: str) -> Path:
    root: Path = manifest["_root"]
    for suffix in (".png", ".jpg", ".jpeg"):
        candidate = root / manifest.get("images_dir", "images") / f"{image_id}{suffix}"
        if candidate.exists():
            return candidate
    raise InputFormatError(f"no image for id {image_id!r}")


def _corpus_layout(manifest: dict, image_id: str, width: int, height: int):
    root: Path = manifest["_root"]
    path = root / manifest.get("layouts_dir", "layouts") / f"{image_id}.json"
    if not path.exists():
        raise InputFormatError(f"no layout for id {image_id!r}")
    return path, load_layout(path, image_id, width, height)


def _mock_backend(behavior_path: Path) -> backend_mod.MockBackend:
    return backend_mod.MockBackend(backend_mod.ScriptedBehavior.from_file(behavior_path))


def _make_backend(kind: str, behavior: Path | None, cfg: PipelineConfig) -> backend_mod.Backend:
    if kind == "mock":
        if behavior is None:
            raise ConfigError("mock backend needs a behavior file")
        return _mock_backend(behavior)
    if not cfg.endpoint or not cfg.model:
        raise ConfigError("remote backend needs endpoint and model in the config")
    return backend_mod.RemoteBackend(
        backend_mod.RemoteConfig(
            endpoint=cfg.endpoint,
            model=cfg.model,
            api_key_env=cfg.api_key_env,
            timeout_s=cfg.timeout_s,
            max_in_flight=cfg.max_in_flight,
            tile_px=cfg.tile_px,
            tokens_per_tile=cfg.tokens_per_tile,
        )
    )


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


@main.command("infer")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["doc-cob", "vanilla"]), default="doc-cob")
@click.option("--backend", "backend_kind", type=click.Choice(["mock", "remote"]), default="mock")
@click.option("--behavior", type=click.Path(exists=True), default=None,
              help="scripted behavior file (defaults to the corpus behavior)")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--k-max", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def infer(corpus_dir, mode, backend_kind, behavior, config_path, k_max, out_dir) -> None:
    """Run inference over a corpus; writes traces.jsonl and predictions.jsonl."""
    cfg = load_config(config_path)
    cfg.log_resolved()
    manifest = _read_corpus(corpus_dir)
    behavior_path = Path(behavior) if behavior else manifest["_root"] / manifest.get("behavior", "behavior.json")
    backend = _make_backend(backend_kind, behavior_path if backend_kind == "mock" else None, cfg)
    style = RenderStyle(
        border_thickness=cfg.border_thickness,
        label_font_px=cfg.label_font_px,
        blur_sigma=cfg.blur_sigma,
    )
    k = k_max if k_max is not None else cfg.k_max

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traces_path = out / "traces.jsonl"
    preds_path = out / "predictions.jsonl"
    n = 0
    with traces_path.open("w", encoding="utf-8") as tf, preds_path.open("w", encoding="utf-8") as pf:
        for rec in _corpus_questions(manifest):
            sample_id = str(rec["sample_id"])
            image_path = _corpus_image(manifest, str(rec["image_id"]))
            img = load_image(image_path)
            if mode == "vanilla":
                trace = orchestrator.infer_vanilla(
                    img, str(rec["question"]), backend, sample_id, cfg.max_output_tokens
                )
            else:
                _, layout = _corpus_layout(manifest, str(rec["image_id"]), *img.size)
                trace = orchestrator.infer_doc_cob(
                    img, layout, str(rec["question"]), backend,
                    style=style, k_max=k, sample_id=sample_id,
                    max_output_tokens=cfg.max_output_tokens,
                )
            tf.write(json.dumps(trace.to_json(), sort_keys=True) + "\n")
            pf.write(
                json.dumps(
                    {
                        "sample_id": sample_id,
                        "answer": trace.answer,
                        "selection": list(trace.selection.ids) if trace.selection else [],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
            n += 1
    click.echo(f"inferred {n} samples -> {preds_path}")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


@main.group("generate")
def generate_group() -> None:
    """Training-data generation."""


def _qa_sample(rec: dict) -> datagen.QASample:
    return datagen.QASample(
        sample_id=str(rec["sample_id"]),
        image_id=str(rec["image_id"]),
        question=str(rec["question"]),
        answers=tuple(str(a) for a in rec.get("answers", [])),
        dataset_tag=str(rec.get("dataset_tag", "dataset")),
    )


def _group_by_image(questions: list[dict]) -> dict[str, list[datagen.QASample]]:
    grouped: dict[str, list[datagen.QASample]] = {}
    for rec in questions:
        grouped.setdefault(str(rec["image_id"]), []).append(_qa_sample(rec))
    return grouped


@generate_group.command("annotate")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--behavior", type=click.Path(exists=True), default=None,
              help="annotator behavior file (defaults to the corpus annotator behavior)")
@click.option("--out", "out_path", required=True, type=click.Path())
@handle_errors
def generate_annotate(corpus_dir, behavior, out_path) -> None:
    """Call the annotator once per image with all of its QA pairs batched."""
    manifest = _read_corpus(corpus_dir)
    behavior_path = Path(behavior) if behavior else manifest["_root"] / manifest.get(
        "annotator_behavior", "annotator_behavior.json"
    )
    backend = _mock_backend(behavior_path)
    grouped = _group_by_image(_corpus_questions(manifest))
    with Path(out_path).open("w", encoding="utf-8") as fh:
        for image_id in sorted(grouped):
            samples = grouped[image_id]
            image_path = _corpus_image(manifest, image_id)
            img = load_image(image_path)
            _, layout = _corpus_layout(manifest, image_id, *img.size)
            prompt = datagen.build_annotation_prompt(layout, samples)
            overlay = render_s1_overlay(img, layout)
            response = backend.invoke(
                backend_mod.ModelRequest(images=(overlay,), instruction=prompt)
            )
            fh.write(
                json.dumps(
                    {
                        "image_id": image_id,
                        "sample_ids": [s.sample_id for s in samples],
                        "raw": response.text,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    click.echo(f"annotated {len(grouped)} images -> {out_path}")


@generate_group.command("qa")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--annotations", "annotations_path", required=True, type=click.Path(exists=True))
@handle_errors
def generate_qa(corpus_dir, annotations_path) -> None:
    """Parse annotator output, run the QA checks, route to dataset or review."""
    manifest = _read_corpus(corpus_dir)
    root: Path = manifest["_root"]
    dataset_store = store.DatasetStore(root / "datasets")
    queue = store.ReviewQueue(root / "review_queue.jsonl", dataset_store)
    grouped = _group_by_image(_corpus_questions(manifest))
    tag = str(manifest.get("dataset_tag", "dataset"))

    accepted = reviewed = 0
    for ln, line in enumerate(Path(annotations_path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            image_id = str(rec["image_id"])
            raw = str(rec["raw"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise InputFormatError(f"{annotations_path}:{ln}: {exc}") from exc
        samples = grouped.get(image_id, [])
        if not samples:
            raise InputFormatError(f"{annotations_path}:{ln}: unknown image {image_id!r}")
        image_path = _corpus_image(manifest, image_id)
        img = load_image(image_path)
        layout_path, layout = _corpus_layout(manifest, image_id, *img.size)

        def factory(annotation, sample, provenance, _ip=image_path, _lp=layout_path):
            draft = store.make_draft(annotation, sample, str(_ip), str(_lp))
            if provenance is None:
                return draft
            return store.DatasetRecord(draft=draft, provenance=provenance)

        try:
            blocks = datagen.parse_annotation(
                raw, layout, len(samples), [s.sample_id for s in samples]
            )
        except InputFormatError:
            for sample in samples:
                stub = datagen.KeyBoxAnnotation(sample.sample_id, frozenset(), frozenset(), {})
                queue.enqueue(factory(stub, sample, None), (datagen.REASON_UNPARSEABLE,))
                reviewed += 1
            continue

        for sample, block in zip(samples, blocks):
            if not block.ok:
                stub = datagen.KeyBoxAnnotation(sample.sample_id, frozenset(), frozenset(), {})
                queue.enqueue(
                    factory(stub, sample, None),
                    (datagen.REASON_UNPARSEABLE, *block.notes),
                )
                reviewed += 1
                continue
            verdict = datagen.check_annotation(block.annotation, layout, sample)
            disposition = datagen.route(
                block.annotation, verdict, sample, factory, dataset_store, queue
            )
            if disposition == datagen.DISPOSITION_DATASET:
                accepted += 1
            else:
                reviewed += 1

    store.write_manifest(dataset_store, tag)
    click.echo(f"accepted {accepted}, routed {reviewed} to review")


@generate_group.command("enabling-tasks")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--cap", type=int, default=datagen.DEFAULT_BOX_ID_CAP)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def generate_enabling_tasks(corpus_dir, cap, seed, out_dir) -> None:
    """Synthesize index-recognition and box-role samples from accepted records."""
    manifest = _read_corpus(corpus_dir)
    root: Path = manifest["_root"]
    dataset_store = store.DatasetStore(root / "datasets")
    tag = str(manifest.get("dataset_tag", "dataset"))
    records = dataset_store.load(tag)
    if not records:
        raise InputFormatError(f"no accepted records for dataset {tag!r}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    box_id_samples = []
    seen_images = set()
    for rec in sorted(records, key=lambda r: r.sample_id):
        image_id = Path(rec.draft.image_path).stem
        if image_id in seen_images:
            continue
        seen_images.add(image_id)
        img = load_image(rec.draft.image_path)
        layout = load_layout(rec.draft.layout_path, image_id, *img.size)
        box_id_samples.extend(datagen.synthesize_box_id_task(layout, cap=cap, seed=seed))

    box_query_samples = []
    for rec in sorted(records, key=lambda r: r.sample_id):
        sample = datagen.QASample(
            sample_id=rec.sample_id,
            image_id=Path(rec.draft.image_path).stem,
            question=rec.draft.question,
            answers=tuple(rec.draft.answers),
            dataset_tag=rec.draft.dataset_tag,
        )
        box_query_samples.extend(datagen.synthesize_box_query_task(rec.draft.annotation(), sample))

    for name, samples in (("box_id.jsonl", box_id_samples), ("box_query.jsonl", box_query_samples)):
        with (out / name).open("w", encoding="utf-8") as fh:
            for s in samples:
                fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
    click.echo(
        f"wrote {len(box_id_samples)} box-id and {len(box_query_samples)} box-query samples"
    )


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


@main.command("eval")
@click.option("--predictions", required=True, type=click.Path(exists=True))
@click.option("--gold", required=True, type=click.Path(exists=True))
@click.option("--metric", type=click.Choice(list(evaluation.METRICS)), required=True)
@click.option("--tau", type=float, default=evaluation.DEFAULT_ANLS_TAU)
@click.option("--day-first", is_flag=True, default=False)
@click.option("--field-types", "field_types_path", type=click.Path(exists=True), default=None)
@click.option("--dataset-tag", default="")
@click.option("--out", "out_dir", required=True, type=click.Path())
@handle_errors
def eval_cmd(predictions, gold, metric, tau, day_first, field_types_path, dataset_tag, out_dir) -> None:
    """Score predictions against gold; writes report.tsv, summary.json, scores.png."""
    field_types = None
    if field_types_path:
        field_types = json.loads(Path(field_types_path).read_text(encoding="utf-8"))
    report = evaluation.evaluate_run(
        predictions, gold, metric,
        tau=tau, day_first=day_first, field_types=field_types, dataset_tag=dataset_tag,
    )
    paths = evaluation.write_report(report, out_dir)
    click.echo(f"{metric} = {report.score:.6f} over {report.n_samples} samples")
    click.echo(f"report: {paths['table']}")


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


@main.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--port", type=int, default=None)
@handle_errors
def serve(config_path, port) -> None:
    """Run the review service."""
    import socket

    import uvicorn

    from .service import ServiceContext, create_app

    cfg = load_config(config_path)
    cfg.log_resolved()
    dataset_store = store.DatasetStore(cfg.datasets_dir)
    queue = store.ReviewQueue(cfg.review_queue, dataset_store)
    ctx = ServiceContext(
        queue=queue,
        dataset_store=dataset_store,
        images_dir=cfg.images_dir,
        layouts_dir=cfg.layouts_dir,
        token=cfg.service_token,
        style=RenderStyle(
            border_thickness=cfg.border_thickness,
            label_font_px=cfg.label_font_px,
            blur_sigma=cfg.blur_sigma,
        ),
    )
    bind_port = port if port is not None else cfg.port
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((cfg.host, bind_port))
    except OSError as exc:
        raise ConfigError(f"cannot bind {cfg.host}:{bind_port}: {exc}") from exc
    finally:
        probe.close()
    uvicorn.run(create_app(ctx), host=cfg.host, port=bind_port, log_level="warning")


if __name__ == "__main__":
    main()
