import numpy as np
import pytest

from dronedet.evalmap import Detection, GroundTruth
from dronedet.losses import Box
from dronedet.tide import ERROR_TYPES, classify_errors, oracle_fix, tide_report

from oracles import box_iou


def make_clean_scene(n_images=3, per_image=3, n_classes=3, spacing=120.0):
    """Well-separated ground truths, each covered by a perfect detection."""
    gts, dets = [], []
    score = 0.99
    for i in range(n_images):
        for j in range(per_image):
            box = Box(60.0 + spacing * j, 60.0 + spacing * (i % 2), 40.0, 40.0)
            cls = (i + j) % n_classes
            gts.append(GroundTruth(f"im{i}", cls, box))
            dets.append(Detection(f"im{i}", cls, score, box))
            score -= 0.007
    return dets, gts


def loc_jitter(box: Box) -> Box:
    # Shift by 60% of the width: IoU lands in (0.1, 0.5).
    out = Box(box.cx + 0.6 * box.w, box.cy, box.w, box.h)
    assert 0.1 < box_iou(out, box) < 0.5
    return out


class Injector:
    """Adds labelled errors to a clean scene and records the manifest."""

    def __init__(self, dets, gts):
        self.dets = list(dets)
        self.gts = list(gts)
        self.manifest = {t: 0 for t in ERROR_TYPES}

    def inject_cls(self, gt_idx, score=0.45):
        g = self.gts[gt_idx]
        wrong = (g.class_id + 1) % 3
        self.dets.append(Detection(g.image_id, wrong, score, g.box))
        self.manifest["cls"] += 1

    def inject_dupe(self, gt_idx, score=0.44):
        g = self.gts[gt_idx]
        self.dets.append(Detection(g.image_id, g.class_id, score, g.box))
        self.manifest["dupe"] += 1

    def inject_bkg(self, image_id, cls=0, score=0.43, where=900.0):
        self.dets.append(Detection(image_id, cls, score,
                                   Box(where, where, 20.0, 20.0)))
        self.manifest["bkg"] += 1

    def inject_loc(self, gt_idx):
        # Replace the clean detection with a loosely localised one; the GT
        # also becomes a miss until the loc error is fixed.
        g = self.gts[gt_idx]
        for k, d in enumerate(self.dets):
            if d.image_id == g.image_id and d.class_id == g.class_id \
                    and box_iou(d.box, g.box) > 0.99:
                self.dets[k] = Detection(d.image_id, d.class_id, d.score,
                                         loc_jitter(g.box))
                break
        self.manifest["loc"] += 1
        self.manifest["miss"] += 1

    def inject_both(self, gt_idx, score=0.42):
        g = self.gts[gt_idx]
        wrong = (g.class_id + 1) % 3
        self.dets.append(Detection(g.image_id, wrong, score, loc_jitter(g.box)))
        self.manifest["both"] += 1

    def inject_miss(self, gt_idx):
        g = self.gts[gt_idx]
        self.dets = [d for d in self.dets
                     if not (d.image_id == g.image_id and d.class_id == g.class_id
                             and box_iou(d.box, g.box) > 0.99)]
        self.manifest["miss"] += 1

    def counts(self):
        labels = classify_errors(self.dets, self.gts)
        got = {t: sum(e == t for e in labels.det_error) for t in ERROR_TYPES}
        got["miss"] = sum(labels.gt_missed)
        return got, labels


class TestClassifyErrors:
    def test_perfect_scene_clean(self):
        dets, gts = make_clean_scene()
        labels = classify_errors(dets, gts)
        assert all(e is None for e in labels.det_error)
        assert not any(labels.gt_missed)

    def test_loose_box_is_loc(self):
        g = GroundTruth("a", 0, Box(50, 50, 40, 40))
        d = Detection("a", 0, 0.9, loc_jitter(g.box))
        labels = classify_errors([d], [g])
        assert labels.det_error == ["loc"]
        assert labels.gt_missed == [True]

    def test_injection_manifest_2cls_1dupe_3bkg(self):
        inj = Injector(*make_clean_scene())
        inj.inject_cls(0)
        inj.inject_cls(4)
        inj.inject_dupe(2)
        inj.inject_bkg("im0")
        inj.inject_bkg("im1")
        inj.inject_bkg("im2")
        got, _ = inj.counts()
        assert got == inj.manifest

    def test_all_six_types_labelled(self):
        inj = Injector(*make_clean_scene(n_images=4))
        inj.inject_cls(0)
        inj.inject_dupe(1)
        inj.inject_bkg("im0")
        inj.inject_loc(5)
        inj.inject_both(7)
        inj.inject_miss(10)
        got, _ = inj.counts()
        assert got == inj.manifest

    def test_ignore_regions_excluded(self):
        gts = [GroundTruth("a", 0, Box(50, 50, 40, 40), ignore=True)]
        dets = [Detection("a", 0, 0.9, Box(50, 50, 40, 40))]
        labels = classify_errors(dets, gts)
        assert labels.det_error == [None]  # absorbed, not an error
        assert labels.gt_missed == [False]


class TestOracleFix:
    def test_cls_fix_restores_clean_map(self):
        dets, gts = make_clean_scene()
        base = tide_report(dets, gts).base_map50
        inj = Injector(dets, gts)
        inj.inject_cls(0)
        labels = classify_errors(inj.dets, inj.gts)
        fixed_dets, fixed_gts = oracle_fix(inj.dets, inj.gts, labels, "cls")
        assert tide_report(fixed_dets, fixed_gts).base_map50 == pytest.approx(base)

    def test_zero_occurrence_fix_is_identity(self):
        dets, gts = make_clean_scene()
        labels = classify_errors(dets, gts)
        fixed_dets, fixed_gts = oracle_fix(dets, gts, labels, "dupe")
        assert fixed_dets == dets and fixed_gts == gts

    def test_miss_fix_keeps_detections(self):
        inj = Injector(*make_clean_scene())
        inj.inject_miss(3)
        labels = classify_errors(inj.dets, inj.gts)
        fixed_dets, fixed_gts = oracle_fix(inj.dets, inj.gts, labels, "miss")
        assert fixed_dets == inj.dets
        assert len(fixed_gts) == len(inj.gts) - 1

    def test_unknown_type_rejected(self):
        dets, gts = make_clean_scene()
        labels = classify_errors(dets, gts)
        with pytest.raises(ValueError, match="unknown error type"):
            oracle_fix(dets, gts, labels, "blur")


class TestTideReport:
    def test_perfect_scene(self):
        dets, gts = make_clean_scene()
        rep = tide_report(dets, gts)
        assert rep.base_map50 == 1.0
        assert all(v == 0.0 for v in rep.penalties.values())

    def test_six_columns(self):
        dets, gts = make_clean_scene()
        rep = tide_report(dets, gts)
        assert tuple(rep.penalties) == ERROR_TYPES

    def test_dropped_matches_make_miss_dominant(self):
        inj = Injector(*make_clean_scene(n_images=4))
        inj.inject_miss(0)
        inj.inject_miss(5)
        inj.inject_miss(9)
        rep = tide_report(inj.dets, inj.gts)
        assert rep.penalties["miss"] > 0.0
        for t in ERROR_TYPES:
            if t != "miss":
                assert rep.penalties["miss"] > rep.penalties[t]

    def test_bkg_dominant_fixture(self):
        inj = Injector(*make_clean_scene())
        # High-scoring background hits outrank real detections and dent AP.
        for image in ("im0", "im1", "im2"):
            inj.dets.append(Detection(image, 0, 0.995, Box(800, 800, 25, 25)))
            inj.manifest["bkg"] += 1
        rep = tide_report(inj.dets, inj.gts)
        assert rep.penalties["bkg"] > 0.0
        for t in ERROR_TYPES:
            if t != "bkg":
                assert rep.penalties["bkg"] >= rep.penalties[t]

    def test_penalties_nonnegative_on_random_injections(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            inj = Injector(*make_clean_scene(n_images=int(rng.integers(2, 5))))
            n_gts = len(inj.gts)
            for _ in range(int(rng.integers(0, 6))):
                kind = rng.choice(["cls", "dupe", "bkg", "loc", "both", "miss"])
                idx = int(rng.integers(n_gts))
                if kind == "cls":
                    inj.inject_cls(idx, score=float(rng.uniform(0.3, 0.98)))
                elif kind == "dupe":
                    inj.inject_dupe(idx, score=float(rng.uniform(0.3, 0.98)))
                elif kind == "bkg":
                    inj.inject_bkg(f"im{int(rng.integers(2))}",
                                   score=float(rng.uniform(0.3, 0.98)),
                                   where=float(rng.uniform(600, 950)))
                elif kind == "loc":
                    inj.inject_loc(idx)
                elif kind == "both":
                    inj.inject_both(idx, score=float(rng.uniform(0.3, 0.98)))
                else:
                    inj.inject_miss(idx)
            rep = tide_report(inj.dets, inj.gts)
            for t, v in rep.penalties.items():
                assert v >= -1e-9, (t, v)

    def test_zero_injected_type_zero_penalty(self):
        inj = Injector(*make_clean_scene())
        # Must outrank at least one true positive to dent interpolated AP.
        inj.inject_bkg("im0", score=0.999)
        rep = tide_report(inj.dets, inj.gts)
        for t in ("cls", "loc", "both", "dupe", "miss"):
            assert rep.penalties[t] == 0.0
        assert rep.penalties["bkg"] > 0.0

    def test_more_injections_weakly_increase_penalty(self):
        inj1 = Injector(*make_clean_scene(n_images=4))
        inj1.inject_miss(0)
        rep1 = tide_report(inj1.dets, inj1.gts)
        inj2 = Injector(*make_clean_scene(n_images=4))
        inj2.inject_miss(0)
        inj2.inject_miss(5)
        rep2 = tide_report(inj2.dets, inj2.gts)
        assert rep2.penalties["miss"] >= rep1.penalties["miss"] - 1e-12

    def test_determinism(self):
        inj = Injector(*make_clean_scene())
        inj.inject_cls(1)
        inj.inject_bkg("im1")
        a = tide_report(inj.dets, inj.gts)
        b = tide_report(inj.dets, inj.gts)
        assert a.penalties == b.penalties
