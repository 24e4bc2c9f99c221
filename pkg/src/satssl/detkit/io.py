"""JSON-lines readers/writers for ground truth, predictions and image inventories."""

from __future__ import annotations

import json
from pathlib import Path

from satssl.detkit.boxes import BBox, GroundTruthObject, Prediction

_BOX_KEYS = ("image_id", "xmin", "ymin", "xmax", "ymax", "class")


class DetectionFileError(ValueError):
    pass


def _iter_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DetectionFileError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            yield lineno, obj


def _class_index(value, vocab, where):
    if isinstance(value, bool):
        raise DetectionFileError(f"{where}: invalid class {value!r}")
    if isinstance(value, int):
        if 0 <= value < len(vocab):
            return value
        raise DetectionFileError(f"{where}: class index {value} outside vocabulary")
    try:
        return vocab.index(value)
    except ValueError:
        raise DetectionFileError(f"{where}: unknown class name {value!r}") from None


def _parse(path, vocab, with_score):
    vocab = list(vocab)
    keys = _BOX_KEYS + (("score",) if with_score else ())
    out = []
    for lineno, obj in _iter_jsonl(path):
        where = f"{path}:{lineno}"
        missing = [k for k in keys if k not in obj]
        if missing:
            raise DetectionFileError(f"{where}: missing keys {missing}")
        try:
            box = BBox(float(obj["xmin"]), float(obj["ymin"]), float(obj["xmax"]), float(obj["ymax"]))
            cls = _class_index(obj["class"], vocab, where)
            if with_score:
                out.append(Prediction(box, cls, float(obj["score"]), str(obj["image_id"])))
            else:
                out.append(GroundTruthObject(box, cls, str(obj["image_id"])))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DetectionFileError):
                raise
            raise DetectionFileError(f"{where}: {exc}") from None
    return out


def read_ground_truth(path, class_vocabulary) -> list[GroundTruthObject]:
    return _parse(path, class_vocabulary, with_score=False)


def read_predictions(path, class_vocabulary) -> list[Prediction]:
    return _parse(path, class_vocabulary, with_score=True)


def _box_row(item, vocab):
    b = item.box
    return {
        "image_id": item.image_id,
        "xmin": b.xmin,
        "ymin": b.ymin,
        "xmax": b.xmax,
        "ymax": b.ymax,
        "class": vocab[item.class_id],
    }


def write_ground_truth(objects, path, class_vocabulary) -> None:
    lines = [json.dumps(_box_row(o, class_vocabulary)) for o in objects]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def write_predictions(preds, path, class_vocabulary) -> None:
    lines = [json.dumps({**_box_row(p, class_vocabulary), "score": p.score}) for p in preds]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_image_sizes(path) -> dict[str, tuple[int, int]]:
    sizes = {}
    for lineno, obj in _iter_jsonl(path):
        try:
            sizes[str(obj["image_id"])] = (int(obj["width"]), int(obj["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DetectionFileError(f"{path}:{lineno}: bad image entry ({exc})") from None
    return sizes


def write_image_sizes(sizes, path) -> None:
    lines = [json.dumps({"image_id": k, "width": w, "height": h}) for k, (w, h) in sizes.items()]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
