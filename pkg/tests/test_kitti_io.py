import math

import numpy as np
import pytest

from dfrnet.kitti_io import (
    CalibP2,
    Difficulty,
    KittiObjectLabel,
    KittiParseError,
    ProjectionError,
    box3d_corners,
    counts_at,
    difficulty_of,
    format_label,
    frame_name,
    parse_calib_file,
    parse_label_file,
    parse_label_line,
    project_box,
    project_point,
    read_label_dir,
    write_calib_file,
    write_label_dir,
    write_label_file,
    write_result_file,
)

KITTI_LINE = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"


def random_label(rng, with_score=False):
    """A record already on the on-disk grid (4 decimals, truncation 2 decimals)."""
    q = lambda lo, hi: round(float(rng.uniform(lo, hi)), 4)  # noqa: E731
    u, v = q(0, 1000), q(0, 300)
    return KittiObjectLabel(
        category=str(rng.choice(["Car", "Pedestrian", "Cyclist", "Van", "Truck"])),
        truncation=round(float(rng.uniform(0, 1)), 2), occlusion=int(rng.integers(0, 4)),
        alpha=q(-math.pi, math.pi), box2d=(u, v, round(u + q(0, 200), 4), round(v + q(0, 100), 4)),
        dims=(q(0.5, 4), q(0.5, 3), q(0.5, 10)), location=(q(-30, 30), q(-2, 3), q(1, 80)),
        rotation_y=q(-math.pi, math.pi), score=q(0, 1) if with_score else None,
    )


def devkit_difficulty(height, occ, trunc):
    """Direct transcription of the devkit rule table, easiest level first."""
    if height >= 40 and occ <= 0 and trunc <= 0.15:
        return 0
    if height >= 25 and occ <= 1 and trunc <= 0.30:
        return 1
    if height >= 25 and occ <= 2 and trunc <= 0.50:
        return 2
    return 3


class TestParse:
    def test_reference_line(self):
        lb = parse_label_line(KITTI_LINE)
        assert lb.category == "Car"
        assert lb.occlusion == 0 and lb.truncation == 0.0
        assert lb.box2d == (587.01, 173.33, 614.12, 200.12)
        assert lb.dims == (1.65, 1.67, 3.64)
        assert lb.location == (-0.65, 1.71, 46.70)
        assert lb.rotation_y == -1.59
        assert lb.score is None
        assert lb.box_height == pytest.approx(26.79)

    def test_score_field(self):
        assert parse_label_line(KITTI_LINE + " 0.93").score == 0.93

    @pytest.mark.parametrize("line,needle", [
        ("Car 0 0 0 1 2 3 4 1 1 1 0 0 5", "15 or 16"),
        (KITTI_LINE.replace("46.70", "far"), "not numeric"),
        (KITTI_LINE.replace("46.70", "nan"), "not finite"),
        (KITTI_LINE.replace("Car 0.00 0", "Car 0.00 1.5"), "integer"),
        (KITTI_LINE.replace("587.01 173.33 614.12", "614.12 173.33 587.01"), "ordered"),
    ])
    def test_malformed(self, line, needle):
        with pytest.raises(KittiParseError, match=needle):
            parse_label_file("\n" + line + "\n")
        with pytest.raises(KittiParseError) as info:
            parse_label_file("\n" + line)
        assert info.value.line == 2

    def test_dont_care_box_not_checked(self):
        lb = parse_label_line("DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10")
        assert lb.category == "DontCare"

    def test_blank_lines_and_bytes(self):
        labels = parse_label_file((KITTI_LINE + "\n\n" + KITTI_LINE + "\n").encode())
        assert len(labels) == 2

    def test_invalid_utf8(self):
        with pytest.raises(KittiParseError) as info:
            parse_label_file(KITTI_LINE.encode() + b"\n\xff\xfe\n")
        assert info.value.line == 2


class TestRoundTrip:
    def test_labels(self):
        rng = np.random.default_rng(0)
        labels = [random_label(rng) for _ in range(200)]
        assert parse_label_file(write_label_file(labels)) == labels

    def test_results(self):
        rng = np.random.default_rng(1)
        labels = [random_label(rng, with_score=True) for _ in range(50)]
        text = write_result_file(labels)
        assert all(len(line.split()) == 16 for line in text.splitlines())
        assert parse_label_file(text) == labels

    def test_result_needs_score(self):
        with pytest.raises(ValueError):
            write_result_file([parse_label_line(KITTI_LINE)])

    def test_format_reference_line(self):
        assert format_label(parse_label_line(KITTI_LINE)) == (
            "Car 0.00 0 -1.5800 587.0100 173.3300 614.1200 200.1200 1.6500 1.6700 3.6400 "
            "-0.6500 1.7100 46.7000 -1.5900")

    def test_calib(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p2 = rng.normal(size=(3, 4))
            p2[0, 0] = abs(p2[0, 0]) + 1.0
            calib = CalibP2(p2)
            assert parse_calib_file(write_calib_file(calib)) == calib

    def test_calib_full_file(self):
        text = "P0: " + " ".join(["0"] * 12) + "\nP2: 7.2e+02 0 6.0e+02 4.5e+01 0 7.2e+02 1.7e+02 -0.3 0 0 1 0.003\n"
        calib = parse_calib_file(text)
        assert calib.p2[0, 0] == 720.0 and calib.p2[2, 3] == 0.003

    @pytest.mark.parametrize("text", ["P1: 1 2 3\n", "P2: 1 2 3\n", "P2: 0 0 0 0 0 0 0 0 0 0 0 0\n"])
    def test_calib_errors(self, text):
        with pytest.raises(KittiParseError):
            parse_calib_file(text)


class TestDifficulty:
    def test_exhaustive_grid(self):
        base = parse_label_line(KITTI_LINE)
        for height in (10.0, 24.99, 25.0, 30.0, 39.99, 40.0, 80.0):
            for occ in (0, 1, 2, 3):
                for trunc in (0.0, 0.15, 0.16, 0.30, 0.31, 0.50, 0.51, 1.0):
                    lb = KittiObjectLabel(base.category, trunc, occ, 0.0, (0.0, 0.0, 10.0, height),
                                          base.dims, base.location, 0.0)
                    assert difficulty_of(lb) == devkit_difficulty(height, occ, trunc)

    def test_reference_line_is_moderate(self):
        lb = parse_label_line(KITTI_LINE)
        assert difficulty_of(lb) is Difficulty.MODERATE
        assert not counts_at(lb, Difficulty.EASY)
        assert counts_at(lb, Difficulty.MODERATE) and counts_at(lb, Difficulty.HARD)
        assert counts_at(lb, None)

    def test_labels(self):
        assert [d.label for d in Difficulty] == ["Easy", "Mod.", "Hard", "Ignored"]


class TestGeometry:
    def test_principal_point(self):
        calib = CalibP2.pinhole(700.0, 600.0, 180.0)
        assert project_point(calib, (0.0, 0.0, 10.0)) == (600.0, 180.0)
        u, v = project_point(calib, (1.0, -0.5, 10.0))
        assert (u, v) == pytest.approx((670.0, 145.0))

    def test_behind_camera(self):
        with pytest.raises(ProjectionError):
            project_point(CalibP2.pinhole(700.0, 600.0, 180.0), (0.0, 0.0, -1.0))

    def test_corners_axis_aligned(self):
        c = box3d_corners((1.5, 2.0, 4.0), (1.0, 1.6, 10.0), 0.0)
        np.testing.assert_allclose(c.min(axis=0), [-1.0, 0.1, 9.0])
        np.testing.assert_allclose(c.max(axis=0), [3.0, 1.6, 11.0])

    def test_corners_quarter_turn(self):
        # yaw pi/2 points the length along -z
        c = box3d_corners((1.5, 2.0, 4.0), (0.0, 0.0, 10.0), math.pi / 2)
        np.testing.assert_allclose(c[:, 0].max() - c[:, 0].min(), 2.0, atol=1e-12)
        np.testing.assert_allclose(c[:, 2].max() - c[:, 2].min(), 4.0, atol=1e-12)
        np.testing.assert_allclose(c[0], [0.0 + 1.0, 0.0, 10.0 - 2.0], atol=1e-12)

    def test_project_box_contains_centre(self):
        calib = CalibP2.pinhole(32.0, 16.0, 16.0)
        u0, v0, u1, v1 = project_box(calib, (1.5, 1.7, 4.0), (0.5, 1.6, 12.0), 0.3)
        uc, vc = project_point(calib, (0.5, 1.6 - 0.75, 12.0))
        assert u0 < uc < u1 and v0 < vc < v1


class TestDirectories:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        frames = {i: [random_label(rng) for _ in range(3)] for i in range(4)}
        write_label_dir(tmp_path, frames)
        assert sorted(p.name for p in tmp_path.iterdir()) == [frame_name(i) for i in range(4)]
        back = read_label_dir(tmp_path)
        assert back == {frame_name(i)[:-4]: frames[i] for i in range(4)}

    def test_default_score(self, tmp_path):
        (tmp_path / "000000.txt").write_text(KITTI_LINE + "\n")
        assert read_label_dir(tmp_path, default_score=1.0)["000000"][0].score == 1.0

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_label_dir(tmp_path / "absent")

    def test_error_names_file(self, tmp_path):
        (tmp_path / "000007.txt").write_text(KITTI_LINE + "\nCar 1 2\n")
        with pytest.raises(KittiParseError) as info:
            read_label_dir(tmp_path)
        assert info.value.path.endswith("000007.txt") and info.value.line == 2

    def test_frame_name(self):
        assert frame_name(42) == "000042.txt"
