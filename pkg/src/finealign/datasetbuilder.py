"""Caption-dataset construction: annotation ingestion, captioning prompts, pluggable
captioner clients and QA sampling."""

from __future__ import annotations

import copy
import csv
import io
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .datamodel import BBox, ImageRecord, ObjectAnnotation

logger = logging.getLogger(__name__)

KINDS = ("short", "long")
BBOX_PROMPT_DECIMALS = 3

_PREAMBLE = (
    "You are a remote sensing expert specialized in image interpretation and caption generation. "
    "You are provided with a remote sensing image and auxiliary data: a list of object bounding boxes "
    "in normalized (x1, y1, x2, y2) format (values between 0 and 1) and their corresponding category labels. "
)

INSTRUCTIONS = {
    "short": _PREAMBLE + (
        "Your task is to generate a concise and accurate caption that describes the image content, "
        "integrating both visual and object-level information. Follow these principles: "
        "(1) Generate a brief caption in two or three sentences that describes the image. "
        "(2) Focus on the types of objects present, their spatial distribution, and the relationships "
        "between them. "
        "(3) Do not include any metadata, annotations, or task instructions in the output — only output "
        "a natural-language caption."
    ),
    "long": _PREAMBLE + (
        "Your task is to generate a detailed, accurate, and fluent caption that describes the image content, "
        "integrating both visual and object-level information. Follow these principles: "
        "(1) Detailed describe the image starting with a brief summary of the overall scene or environment. "
        "(2) If the number of objects is small, describe their attributes, approximate locations, and "
        "inter-object relationships. "
        "(3) If the number of objects is large, describe the object distribution, density, and spatial "
        "patterns. "
        "(4) Do not include any metadata, annotations, or task instructions in the output — only output "
        "a natural-language caption."
    ),
}

_OBJ_RE = re.compile(r"(.+?): \[(-?[\d.]+), (-?[\d.]+), (-?[\d.]+), (-?[\d.]+)\]$")


@dataclass(frozen=True)
class CaptionPrompt:
    kind: str
    instruction: str
    object_info: str

    @property
    def text(self) -> str:
        return f"{self.instruction}\n\n{{Image}}\n\n{self.object_info}"


def format_bbox(b: BBox, decimals: int = BBOX_PROMPT_DECIMALS) -> str:
    return "[" + ", ".join(f"{v:.{decimals}f}" for v in b.as_list()) + "]"


def serialize_objects(objects: Sequence[ObjectAnnotation]) -> str:
    if not objects:
        return "Object infos: none"
    return "Object infos: " + "; ".join(f"{o.category}: {format_bbox(o.bbox)}" for o in objects)


def parse_object_info(text: str) -> list[tuple[str, list[float]]]:
    """Inverse of :func:`serialize_objects` (coordinates at prompt precision)."""
    body = text.split("Object infos: ", 1)[-1].strip()
    if body == "none":
        return []
    out = []
    for part in body.split("; "):
        m = _OBJ_RE.match(part)
        if m is None:
            raise ValueError(f"cannot parse object entry {part!r}")
        out.append((m.group(1), [float(m.group(k)) for k in range(2, 6)]))
    return out


def assemble_prompt(record: ImageRecord, kind: str) -> CaptionPrompt:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    return CaptionPrompt(kind, INSTRUCTIONS[kind], serialize_objects(record.objects))


class CaptionerClient(Protocol):
    def generate(self, image, prompt: CaptionPrompt) -> str: ...


class MockCaptioner:
    """Deterministic offline captioner naming every annotated category."""

    OPENINGS = ("An overhead view showing", "A remote sensing scene with", "Aerial imagery containing")

    def __init__(self, seed: int = 0):
        self.seed = seed

    def generate(self, image, prompt: CaptionPrompt) -> str:
        cats = [c for c, _ in parse_object_info(prompt.object_info)]
        key = sum(map(ord, prompt.object_info)) + self.seed
        opening = self.OPENINGS[key % len(self.OPENINGS)]
        if not cats:
            return f"{opening} no annotated objects."
        if prompt.kind == "short":
            return f"{opening} {', '.join(cats)}."
        return f"{opening} {len(cats)} annotated objects. " + " ".join(
            f"There is {c} in the scene." for c in cats)


class RecordedCaptioner:
    """Replays captions keyed by ``(object_info, kind)`` or ``object_info``."""

    def __init__(self, responses: dict):
        self.responses = responses

    def generate(self, image, prompt: CaptionPrompt) -> str:
        for key in ((prompt.object_info, prompt.kind), prompt.object_info):
            if key in self.responses:
                return self.responses[key]
        raise KeyError("no recorded response for prompt")


def _call_with_retry(client, image, prompt, retries: int, backoff: float, timeout):
    last = None
    for attempt in range(retries + 1):
        try:
            if timeout is not None and hasattr(client, "timeout"):
                client.timeout = timeout
            out = client.generate(image, prompt)
            if not isinstance(out, str) or not out.strip():
                raise ValueError("empty caption")
            return out, None
        except Exception as exc:  # client failures of any kind are retried
            last = exc
            if backoff and attempt < retries:
                time.sleep(backoff * 2 ** attempt)
    return None, f"{type(last).__name__}: {last}"


def recaption(records: Sequence[ImageRecord], client: CaptionerClient, kind: str = "short", *,
              retries: int = 2, backoff: float = 0.0, timeout: float | None = None,
              max_workers: int = 1, with_image: bool = False) -> list[ImageRecord]:
    """Return copies of ``records`` with ``caption_<kind>`` regenerated.

    Records whose client calls fail after ``retries`` keep their old caption and
    get ``meta["caption_error_<kind>"]``; nothing is dropped.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    field = f"caption_{kind}"

    def work(rec: ImageRecord):
        image = rec.image if with_image else None
        return _call_with_retry(client, image, assemble_prompt(rec, kind), retries, backoff, timeout)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(work, records))
    else:
        results = [work(r) for r in records]
    out = []
    for rec, (caption, err) in zip(records, results):
        new = copy.copy(rec)
        new.objects = list(rec.objects)
        new.meta = dict(rec.meta)
        if err is None:
            setattr(new, field, caption)
            new.meta.pop(f"caption_error_{kind}", None)
        else:
            logger.warning("captioning failed for %s: %s", rec.image_id, err)
            new.meta[f"caption_error_{kind}"] = err
        out.append(new)
    return out


def qa_sample(records: Sequence[ImageRecord], n: int = 200, rng: np.random.Generator | None = None,
              kind: str = "short") -> tuple[list[ImageRecord], str]:
    """Uniform sample without replacement plus a CSV review sheet with a blank verdict column."""
    if n > len(records):
        raise ValueError(f"cannot sample {n} of {len(records)} records")
    rng = rng if rng is not None else np.random.default_rng(0)
    picks = np.sort(rng.choice(len(records), size=n, replace=False))
    subset = [records[i] for i in picks]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", "caption", "verdict"])
    for rec in subset:
        writer.writerow([rec.image_id, getattr(rec, f"caption_{kind}"), ""])
    return subset, buf.getvalue()


def coco_to_records(coco: dict) -> list[ImageRecord]:
    """COCO-style detection JSON (pixel ``[x, y, w, h]`` boxes) to records with
    normalized boxes. Annotation order within an image is preserved."""
    cats = {c["id"]: c["name"] for c in coco.get("categories", [])}
    images = {im["id"]: im for im in coco["images"]}
    objs: dict = {k: [] for k in images}
    for ann in coco.get("annotations", []):
        im = images[ann["image_id"]]
        W, H = float(im["width"]), float(im["height"])
        x, y, w, h = (float(v) for v in ann["bbox"])
        box = BBox(max(x / W, 0.0), max(y / H, 0.0), min((x + w) / W, 1.0), min((y + h) / H, 1.0))
        objs[ann["image_id"]].append(ObjectAnnotation(box, cats.get(ann["category_id"], str(ann["category_id"]))))
    records = []
    for img_id, im in images.items():
        name = str(im.get("file_name", img_id))
        records.append(ImageRecord(image_id=str(name.rsplit(".", 1)[0]), caption_short=im.get("caption", ""),
                                   caption_long="", objects=objs[img_id], image_path=im.get("file_name")))
    return records


def load_annotations(obj) -> list[ImageRecord]:
    """Detection annotations: COCO-style dict, or a list of native records
    ``{"image_id", "image_path", "objects": [{"bbox": [x1,y1,x2,y2], "category"}]}``."""
    if isinstance(obj, dict) and "images" in obj:
        return coco_to_records(obj)
    if isinstance(obj, list):
        out = []
        for o in obj:
            objects = [ObjectAnnotation(BBox.from_list(a["bbox"]), a["category"]) for a in o.get("objects", [])]
            out.append(ImageRecord(image_id=str(o["image_id"]), caption_short=o.get("caption_short", ""),
                                   caption_long=o.get("caption_long", ""), objects=objects,
                                   image_path=o.get("image_path")))
        return out
    raise ValueError("unrecognised annotation format")
