import csv
import filecmp
import json

import numpy as np
import pytest

from ecgfed import raster
from ecgfed.digitize import vectorize_mask
from ecgfed.synthgen import (BUILTIN_PROFILES, DESK_COUNTS, LEADS, PAPER_SITE_SIZES, LeadSignalSet, RenderSpec,
                             apply_profile, build_dataset, draw_parameters, identity_profile, import_csv_signal,
                             load_client_arrays, make_page, render_page, split_records, synth_waveforms)
from ecgfed.synthgen.waveforms import ONSET_JITTER


def write_signal_csv(path, t, data, columns=("time",) + LEADS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for i, ti in enumerate(t):
            w.writerow([repr(float(ti))] + [repr(float(v)) for v in data[:, i]])


class TestWaveforms:
    def test_seeded(self):
        a, b = synth_waveforms(17), synth_waveforms(17)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, synth_waveforms(18).data)

    def test_sixty_bpm(self):
        sig = synth_waveforms(3, fs=500, hr_bpm=60.0)
        onsets = np.array(sig.flags["onsets"])
        assert onsets.size == 10
        assert np.all(np.abs(np.diff(onsets) - 1.0) <= 2 * ONSET_JITTER)
        assert sig.data.shape == (12, 5000)

    def test_amplitude_bound(self):
        peak = max(np.abs(synth_waveforms(s, fs=100, hr_bpm=40 + s % 141).data).max() for s in range(1000))
        assert peak <= 3.0

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            synth_waveforms(0, fs=250)
        with pytest.raises(ValueError):
            synth_waveforms(0, hr_bpm=200)


class TestCsvImport:
    def test_short_record_padded(self, tmp_path):
        t = np.arange(800) / 100
        data = np.ones((12, 800))
        write_signal_csv(tmp_path / "s.csv", t, data)
        sig = import_csv_signal(tmp_path / "s.csv")
        assert sig.fs == 100 and sig.data.shape == (12, 1000)
        assert np.all(sig.data[:, :800] == 1.0)
        assert np.all(sig.data[:, 800:] == 0.0)

    def test_long_record_clipped(self, tmp_path):
        t = np.arange(1200) / 100
        data = np.tile(t, (12, 1))
        write_signal_csv(tmp_path / "s.csv", t, data)
        sig = import_csv_signal(tmp_path / "s.csv")
        assert sig.data.shape == (12, 1000)
        np.testing.assert_allclose(sig.data[0], t[:1000], rtol=0, atol=1e-12)

    def test_exact_length_identity(self, tmp_path):
        src = synth_waveforms(9, fs=500)
        src.to_csv(tmp_path / "s.csv")
        back = import_csv_signal(tmp_path / "s.csv")
        assert back.fs == 500
        assert np.array_equal(back.data, src.data)

    def test_column_order_normalized(self, tmp_path):
        t = np.arange(1000) / 100
        data = np.arange(12)[:, None] * np.ones((12, 1000))
        cols = ("t",) + LEADS[::-1]
        write_signal_csv(tmp_path / "s.csv", t, data, cols)
        sig = import_csv_signal(tmp_path / "s.csv")
        assert sig.lead("V6")[0] == 0.0 and sig.lead("I")[0] == 11.0

    def test_missing_lead_named(self, tmp_path):
        t = np.arange(10) / 100
        write_signal_csv(tmp_path / "s.csv", t, np.zeros((11, 10)), ("time",) + LEADS[:-1])
        with pytest.raises(ValueError, match="V6"):
            import_csv_signal(tmp_path / "s.csv")

    def test_non_monotone_time(self, tmp_path):
        t = np.array([0.0, 0.01, 0.01, 0.03])
        write_signal_csv(tmp_path / "s.csv", t, np.zeros((12, 4)))
        with pytest.raises(ValueError, match="increasing"):
            import_csv_signal(tmp_path / "s.csv")

    def test_unobserved_cells_blank(self, tmp_path):
        sig = synth_waveforms(1, fs=100)
        obs = np.zeros(sig.data.shape, bool)
        obs[0, :5] = True
        LeadSignalSet(sig.data, 100.0, observed=obs).to_csv(tmp_path / "o.csv")
        rows = list(csv.reader(open(tmp_path / "o.csv")))
        assert rows[1][1] != "" and rows[1][2] == ""
        assert rows[6][1] == ""


class TestRender:
    @staticmethod
    def constant_signal(mv):
        return LeadSignalSet(np.full((12, 5000), float(mv)), 500.0)

    def test_zero_signal_flat_traces(self):
        page = render_page(self.constant_signal(0.0), seed=2, record_id="z")
        for lead, (x0, y0, x1, y1) in page.calib.panel_boxes.items():
            rows = np.nonzero(page.mask[y0:y1, x0 + 2:x1 - 2].any(axis=1))[0] + y0
            assert rows.size and np.all(np.abs(rows - page.calib.baseline_rows[lead]) <= 1)
        sig, _ = vectorize_mask(page.mask, page.calib)
        assert np.abs(sig.data[sig.observed]).max() < 1e-9

    def test_one_millivolt_height(self):
        page = render_page(self.constant_signal(1.0), seed=2, record_id="p")
        spec = RenderSpec()
        lift = spec.gain * 1.0 / spec.mm_per_px
        for lead, (x0, y0, x1, y1) in page.calib.panel_boxes.items():
            rows, _ = np.nonzero(page.mask[y0:y1, x0 + 2:x1 - 2])
            assert np.mean(rows + y0) == pytest.approx(page.calib.baseline_rows[lead] - lift, abs=1e-9)

    def test_mask_inside_ink(self, clean_page):
        assert clean_page.mask.sum() > 0
        assert np.all(clean_page.image[clean_page.mask] <= 0.5)

    def test_layout(self, clean_page):
        cal = clean_page.calib
        assert (cal.height, cal.width) == clean_page.image.shape == RenderSpec().page_shape
        cover = np.zeros(clean_page.image.shape, int)
        for x0, y0, x1, y1 in cal.panel_boxes.values():
            cover[y0:y1, x0:x1] += 1
        assert cover.max() == 1
        assert cover.sum() == 3 * 4 * RenderSpec().panel_w * RenderSpec().panel_h
        assert cal.time_windows["aVL"] == (2.5, 5.0) and cal.time_windows["V6"] == (7.5, 10.0)
        assert len(cal.pulse_boxes) == 3

    def test_grid_contrast(self):
        spec = RenderSpec()
        page = render_page(self.constant_signal(0.0), spec, grid_contrast=0.6, record_id="g")
        m = spec.margin_px
        major_ink = page.image[m + 10, m + 1 * 20]  # a row between lines, on a major column
        cover = spec.grid_line_mm / spec.mm_per_px
        assert major_ink == pytest.approx(1 - cover * (1 - 0.4 / 1.6))

    def test_calibration_dict_round_trip(self, clean_page):
        d = json.loads(json.dumps(clean_page.calib.to_dict()))
        assert type(clean_page.calib).from_dict(d) == clean_page.calib


class TestProfiles:
    def test_c1_ranges(self):
        for i in range(200):
            p = draw_parameters(BUILTIN_PROFILES["C1"], 0, f"C1-{i:05d}")
            assert -0.5 <= p["skew_deg"] <= 0.5
            assert 90 <= p["quality"] <= 95
            assert 35 <= p["snr_db"] <= 40

    def test_c5_ranges(self):
        for i in range(200):
            p = draw_parameters(BUILTIN_PROFILES["C5"], 0, f"C5-{i:05d}")
            assert 0.7 <= p["blur_sigma"] <= 1.0
            assert -10 <= p["offset_x"] <= 10 and -10 <= p["offset_y"] <= 10

    def test_overlay_rate(self):
        hits = sum(draw_parameters(BUILTIN_PROFILES["C3"], 1, f"r{i}")["overlay"] is not None for i in range(4000))
        assert hits / 4000 == pytest.approx(0.15, abs=0.02)
        assert all(p.overlay_prob == 0.15 for p in BUILTIN_PROFILES.values())

    def test_identity_profile(self, clean_page):
        out = apply_profile(clean_page, identity_profile(), 0)
        assert np.abs(out.image - clean_page.image).max() < 0.01
        assert np.array_equal(out.mask, clean_page.mask)

    def test_provenance(self, perturbed_pages):
        prov = perturbed_pages["C4"].provenance
        assert prov["profile"] == "C4" and prov["perturbed"]
        assert {"skew_deg", "quality", "snr_db", "blur_sigma", "offset_x", "offset_y", "overlay"} <= set(prov)
        with pytest.raises(ValueError):
            apply_profile(perturbed_pages["C4"], BUILTIN_PROFILES["C4"], 0)

    def test_offsets_move_calibration(self, perturbed_pages):
        page = perturbed_pages["C5"]
        clean = make_page("C5-00003", BUILTIN_PROFILES["C5"], 0, perturb=False)
        dx, dy = page.provenance["offset_x"], page.provenance["offset_y"]
        assert page.calib.panel_boxes["I"][0] == clean.calib.panel_boxes["I"][0] + dx
        assert page.calib.baseline_rows["V1"] == clean.calib.baseline_rows["V1"] + dy

    def test_c1_mask_matches_dark_trace(self, perturbed_pages):
        page = perturbed_pages["C1"]
        dark = raster.robust_normalize(page.image, 0.01, 0.99) < 0.5
        m = page.mask
        dice = 2 * np.sum(dark & m) / (dark.sum() + m.sum())
        assert dice >= 0.7

    def test_range_validation(self):
        with pytest.raises(ValueError):
            type(BUILTIN_PROFILES["C1"])("bad", skew_range=(1.0, -1.0))


SMALL_COUNTS = {"C1": 5, "C2": 4, "C3": 3, "C4": 3, "C5": 5}


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return root, build_dataset(root, counts=SMALL_COUNTS, seed=4)


class TestDataset:
    COUNTS = SMALL_COUNTS

    def test_disjoint_ids_and_split(self, built):
        _, man = built
        ids = [r["record_id"] for r in man["records"]]
        assert len(ids) == len(set(ids)) == sum(self.COUNTS.values())
        for name, n in self.COUNTS.items():
            recs = [r for r in man["records"] if r["client"] == name]
            assert {r["record_id"].split("-")[0] for r in recs} == {name}
            assert sum(r["split"] == "train" for r in recs) == round(0.8 * n)

    def test_manifest_paths(self, built):
        root, man = built
        for r in man["records"]:
            for key in ("image", "mask", "signal", "meta"):
                assert (root / r[key]).is_file()
            assert r[key].startswith(f"{r['client']}/{r['split']}/")
        assert man["seed"] == 4 and set(man["profiles"]) == set(self.COUNTS)

    def test_byte_identical_rebuild(self, built, tmp_path):
        root, _ = built
        build_dataset(tmp_path, counts=self.COUNTS, seed=4, workers=2)
        cmp = filecmp.dircmp(root, tmp_path)
        files = [p.relative_to(root) for p in root.rglob("*") if p.is_file()]
        assert files
        for rel in files:
            assert (root / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel
        assert not cmp.left_only and not cmp.right_only

    def test_client_arrays(self, built):
        root, _ = built
        x, m, ids = load_client_arrays(root, "C1", "train")
        assert x.dtype == np.uint8 and m.dtype == bool
        assert x.shape == m.shape == (4,) + RenderSpec().page_shape
        assert ids == sorted(ids)

    def test_site_size_splits(self):
        for name, n in PAPER_SITE_SIZES.items():
            ids = [f"{name}-{i:05d}" for i in range(n)]
            split = split_records(ids, 0, name)
            assert sum(v == "train" for v in split.values()) == round(0.8 * n)
        assert DESK_COUNTS == {"C1": 200, "C2": 160, "C3": 140, "C4": 120, "C5": 100}

    def test_rejects_empty_client(self, tmp_path):
        with pytest.raises(ValueError):
            build_dataset(tmp_path, counts={**self.COUNTS, "C2": 0})
