from pathlib import Path

import numpy as np
import pytest
from PIL import Image


def write_voc(root: Path, masks, split="train", sizes=None, palette=True):
    """Write a VOC-layout directory holding one image per mask."""
    (root / "JPEGImages").mkdir(parents=True, exist_ok=True)
    (root / "SegmentationClass").mkdir(parents=True, exist_ok=True)
    (root / "ImageSets" / "Segmentation").mkdir(parents=True, exist_ok=True)
    stems = []
    rng = np.random.default_rng(0)
    for i, mask in enumerate(masks):
        stem = f"2007_{i:06d}"
        h, w = mask.shape
        Image.fromarray(rng.integers(0, 256, (h, w, 3), dtype=np.uint8)).save(root / "JPEGImages" / f"{stem}.png")
        m = Image.fromarray(mask.astype(np.uint8), mode="P" if palette else "L")
        if palette:
            m.putpalette([v for i in range(256) for v in (i, 255 - i, (7 * i) % 256)])
        m.save(root / "SegmentationClass" / f"{stem}.png")
        stems.append(stem)
    (root / "ImageSets" / "Segmentation" / f"{split}.txt").write_text("\n".join(stems) + "\n")
    return stems


@pytest.fixture
def mini_voc(tmp_path):
    masks = [np.zeros((20, 24), np.int64), np.ones((24, 20), np.int64), np.full((16, 16), 2, np.int64)]
    masks[0][5:10, 5:10] = 1
    masks[1][0, :] = 255
    root = tmp_path / "voc"
    write_voc(root, masks, "train")
    write_voc(root, masks[:2], "val")
    return root


def tiny_run(out_dir, epochs=2, **overrides):
    """A seconds-long synthetic run configuration."""
    from segdoctor.core import TreatmentConfig
    from segdoctor.training import DataSpec, RunConfig

    treatment = TreatmentConfig(**{"s": 4, "batch_size": 4, "lr": 0.05, **overrides.pop("treatment", {})})
    data = DataSpec(num_train=8, num_val=4, size=(32, 32), seed=0)
    return RunConfig(treatment=treatment, data=data, epochs=epochs, out_dir=str(out_dir), **overrides)


# one (criterion, passed, detail) entry per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
