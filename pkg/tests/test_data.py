import numpy as np
import pytest
import torch

from hmark.data import (
    list_images,
    load_image,
    load_images,
    make_records,
    read_manifest,
    save_image_batch,
    synth_images,
    write_manifest,
)


class TestSynth:
    def test_shape_range_dtype(self):
        x = synth_images(5, 16, seed=0)
        assert x.shape == (5, 3, 16, 16)
        assert x.dtype == torch.float32
        assert x.min() >= -1 and x.max() <= 1

    def test_deterministic_given_seed(self):
        assert torch.equal(synth_images(3, 16, seed=4), synth_images(3, 16, seed=4))
        assert not torch.equal(synth_images(3, 16, seed=4), synth_images(3, 16, seed=5))

    def test_images_are_diverse(self):
        x = synth_images(8, 16, seed=1)
        flat = x.reshape(8, -1)
        dists = torch.cdist(flat, flat)
        off_diag = dists[~torch.eye(8, dtype=torch.bool)]
        assert off_diag.min() > 1.0  # no near-duplicates


class TestRoundtrip:
    def test_png_roundtrip_quantized(self, tmp_path):
        x = synth_images(4, 16, seed=2)
        names = save_image_batch(tmp_path, x)
        back = load_images(tmp_path, names)
        # 8-bit quantization error only
        assert float((back - x).abs().max()) <= (1.0 / 127.5) / 2 + 1e-6

    def test_list_images_sorted(self, tmp_path):
        save_image_batch(tmp_path, synth_images(3, 16, seed=0), prefix="b")
        save_image_batch(tmp_path, synth_images(2, 16, seed=1), prefix="a")
        names = list_images(tmp_path)
        assert names == sorted(names)
        assert len(names) == 5


class TestManifest:
    def test_roundtrip(self, tmp_path):
        records = make_records(["a.png", "b.png"], role="wm", secret="1010",
                               sources=["s/a.png", "s/b.png"], seed=3)
        write_manifest(tmp_path, role="wm", records=records, extra={"note": 1})
        doc = read_manifest(tmp_path)
        assert doc["role"] == "wm"
        assert doc["records"] == records
        assert doc["extra"] == {"note": 1}
        assert doc["records"][0]["secret"] == "1010"

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path)
