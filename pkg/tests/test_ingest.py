import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from polyspect import (
    DataQualityWarning,
    ManifestError,
    RegistrationError,
    StackError,
    estimate_translation,
    load_manifest,
    load_stack,
    register_stack,
    save_manifest,
)
from conftest import write_stack_files


def blob_image(seed: int, size: int = 160) -> np.ndarray:
    rng = np.random.default_rng(seed)
    base = np.zeros((size, size))
    ys, xs = np.mgrid[0:size, 0:size]
    for _ in range(12):
        cx, cy = rng.uniform(20, size - 20, 2)
        r = rng.uniform(4, 12)
        base += np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r)) * rng.uniform(80, 255)
    return np.clip(base, 0, 255)


def translate(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Non-circular translation; vacated pixels become zero."""
    out = np.zeros_like(img)
    h, w = img.shape[:2]
    xs0, xs1 = max(0, dx), min(w, w + dx)
    ys0, ys1 = max(0, dy), min(h, h + dy)
    out[ys0:ys1, xs0:xs1] = img[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx]
    return out


def as_rgb(plane: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(plane, dtype=np.uint8)[..., None], 3, axis=-1)


class TestLoadManifest:
    def make(self, tmp_path, n=20, **kw):
        images = [np.zeros((8, 8, 3), np.uint8) for _ in range(n)]
        return write_stack_files(tmp_path, images, **kw)

    def test_defaults_applied(self, tmp_path):
        path = self.make(tmp_path, n=20, mask_condition_index=None)
        m = load_manifest(path)
        assert m.mask_condition_index == 12
        assert m.pixel_scale_um_per_px == 11.65
        assert m.is_canonical
        assert m.condition_count == 20

    def test_duplicate_index_rejected(self, tmp_path):
        path = self.make(tmp_path, n=3)
        text = path.read_text().replace("index = 2", "index = 1", 1)
        path.write_text(text)
        with pytest.raises(ManifestError, match="duplicate condition index"):
            load_manifest(path)

    def test_non_canonical_warns_but_loads(self, tmp_path):
        path = self.make(tmp_path, n=4, mask_condition_index=1)
        with pytest.warns(DataQualityWarning, match="non-canonical"):
            m = load_manifest(path)
        assert not m.is_canonical
        assert m.condition_count == 4

    def test_missing_mask_condition_rejected(self, tmp_path):
        path = self.make(tmp_path, n=4, mask_condition_index=99)
        with pytest.raises(ManifestError, match="mask condition"):
            load_manifest(path)

    def test_default_mask_condition_falls_back_when_12_absent(self, tmp_path):
        path = self.make(tmp_path, n=4, mask_condition_index=None)
        with pytest.warns(DataQualityWarning):
            m = load_manifest(path)
        assert m.mask_condition_index == 1

    def test_nonpositive_scale_rejected(self, tmp_path):
        path = self.make(tmp_path, n=2, mask_condition_index=1, pixel_scale=-1.0)
        with pytest.raises(ManifestError, match="pixel scale"):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "nope.toml")

    def test_digest_tracks_condition_set(self, tmp_path):
        m20 = load_manifest(self.make(tmp_path / "a", n=20))
        with pytest.warns(DataQualityWarning):
            m4 = load_manifest(self.make(tmp_path / "b", n=4, mask_condition_index=1))
        assert m20.condition_digest() != m4.condition_digest()
        assert m20.condition_digest() == load_manifest(tmp_path / "a" / "manifest.toml").condition_digest()

    def test_save_round_trip(self, tmp_path):
        m = load_manifest(self.make(tmp_path, n=20))
        save_manifest(m, tmp_path / "copy.toml")
        m2 = load_manifest(tmp_path / "copy.toml")
        assert m2.mask_condition_index == m.mask_condition_index
        assert m2.pixel_scale_um_per_px == m.pixel_scale_um_per_px
        assert [c.index for c in m2.conditions] == [c.index for c in m.conditions]


class TestLoadStack:
    def test_consistent_stack(self, tmp_path):
        imgs = [as_rgb(blob_image(s, 64)) for s in range(3)]
        m = load_manifest(write_stack_files(tmp_path, imgs, mask_condition_index=1))
        stack = load_stack(m)
        assert len(stack) == 3
        assert (stack.width, stack.height) == (64, 64)
        assert np.all(stack.registration_offsets == 0)
        assert np.array_equal(stack.images[1], imgs[1])

    def test_dimension_mismatch(self, tmp_path):
        imgs = [np.zeros((64, 64, 3), np.uint8), np.zeros((64, 63, 3), np.uint8)]
        m = load_manifest(write_stack_files(tmp_path, imgs, mask_condition_index=1))
        with pytest.raises(StackError, match="dimension mismatch"):
            load_stack(m)

    def test_grayscale_replicated_with_warning(self, tmp_path):
        m_path = write_stack_files(
            tmp_path, [np.zeros((16, 16, 3), np.uint8)], mask_condition_index=1
        )
        gray = Image.fromarray(np.full((16, 16), 99, np.uint8))
        gray.save(tmp_path / "cond_01.png")
        m = load_manifest(m_path)
        with pytest.warns(DataQualityWarning, match="grayscale"):
            stack = load_stack(m)
        assert np.all(stack.images[0] == 99)

    def test_lossy_format_warns(self, tmp_path):
        m_path = write_stack_files(
            tmp_path, [np.zeros((16, 16, 3), np.uint8)], mask_condition_index=1
        )
        (tmp_path / "cond_01.png").unlink()
        Image.fromarray(as_rgb(blob_image(2, 64))[:16, :16]).save(
            tmp_path / "cond_01.png", format="JPEG"
        )
        with pytest.warns(DataQualityWarning, match="lossy"):
            load_stack(load_manifest(m_path))

    def test_unreadable_image(self, tmp_path):
        m_path = write_stack_files(
            tmp_path, [np.zeros((16, 16, 3), np.uint8)], mask_condition_index=1
        )
        (tmp_path / "cond_01.png").write_bytes(b"not an image")
        with pytest.raises(StackError, match="cannot decode"):
            load_stack(load_manifest(m_path))

    def test_missing_image(self, tmp_path):
        m_path = write_stack_files(
            tmp_path, [np.zeros((16, 16, 3), np.uint8)], mask_condition_index=1
        )
        (tmp_path / "cond_01.png").unlink()
        with pytest.raises(StackError, match="not found"):
            load_stack(load_manifest(m_path))

    def test_images_read_only(self, tmp_path):
        imgs = [as_rgb(blob_image(0, 64))]
        stack = load_stack(load_manifest(write_stack_files(tmp_path, imgs, mask_condition_index=1)))
        with pytest.raises(ValueError):
            stack.images[0, 0, 0, 0] = 1


class TestRegisterStack:
    def stack_with_shifts(self, tmp_path, shifts, size=160, seed=5):
        base = blob_image(seed, size)
        imgs = [as_rgb(translate(base, dx, dy)) for dx, dy in shifts]
        manifest = load_manifest(write_stack_files(tmp_path, imgs, mask_condition_index=1))
        return load_stack(manifest), manifest

    def test_identical_stack_is_noop(self, tmp_path):
        stack, manifest = self.stack_with_shifts(tmp_path, [(0, 0)] * 4)
        reg = register_stack(stack, manifest)
        assert np.all(reg.registration_offsets == 0)
        assert (reg.width, reg.height) == (stack.width, stack.height)
        assert np.array_equal(reg.images, stack.images)

    def test_known_shift_recovered(self, tmp_path):
        stack, manifest = self.stack_with_shifts(tmp_path, [(0, 0), (5, -3)])
        reg = register_stack(stack, manifest)
        # estimated translation of condition 2 is (5, -3); the applied
        # correction recorded in the stack is its negation
        assert tuple(reg.registration_offsets[1]) == (-5.0, 3.0)
        assert reg.width == stack.width - 5
        assert reg.height == stack.height - 3
        # aligned content agrees on the overlap
        assert np.array_equal(reg.images[0], reg.images[1])

    def test_boundary_error_names_condition(self, tmp_path):
        stack, manifest = self.stack_with_shifts(tmp_path, [(0, 0), (40, 0)])
        with pytest.raises(RegistrationError, match="condition 2") as err:
            register_stack(stack, manifest, max_shift_px=10)
        assert err.value.condition_index == 2

    def test_shift_at_bound_is_accepted(self, tmp_path):
        stack, manifest = self.stack_with_shifts(tmp_path, [(0, 0), (20, 20)])
        reg = register_stack(stack, manifest, max_shift_px=20)
        assert tuple(reg.registration_offsets[1]) == (-20.0, -20.0)

    def test_output_never_larger_than_input(self, tmp_path):
        stack, manifest = self.stack_with_shifts(tmp_path, [(0, 0), (3, 7), (-2, -4)])
        reg = register_stack(stack, manifest)
        assert reg.width <= stack.width and reg.height <= stack.height

    def test_high_ev_companion_follows_its_condition(self, tmp_path):
        base = blob_image(11, 128)
        shifted = translate(base, 6, -2)
        m_path = write_stack_files(
            tmp_path,
            [as_rgb(base), as_rgb(shifted)],
            mask_condition_index=1,
            high_ev={1: as_rgb(shifted)},
        )
        manifest = load_manifest(m_path)
        stack = load_stack(manifest)
        reg = register_stack(stack, manifest)
        assert np.array_equal(reg.high_ev[1], reg.images[1])

    def test_negative_max_shift_rejected(self, tmp_path):
        stack, manifest = self.stack_with_shifts(tmp_path, [(0, 0)])
        with pytest.raises(ValueError):
            register_stack(stack, manifest, max_shift_px=-1)


_PROPERTY_IMAGE = blob_image(99, 128)


@given(dx=st.integers(-12, 12), dy=st.integers(-12, 12))
@settings(max_examples=40, deadline=None)
def test_translation_recovery_property(dx, dy):
    moved = translate(_PROPERTY_IMAGE, dx, dy)
    est = estimate_translation(_PROPERTY_IMAGE, moved)
    assert est == (-dx, -dy)


def test_estimate_translation_smooth_texture():
    rng = np.random.default_rng(1)
    base = ndimage.gaussian_filter(rng.random((160, 160)), 4) * 255
    for dx, dy in [(20, 20), (-20, 13), (0, -20)]:
        assert estimate_translation(base, translate(base, dx, dy)) == (-dx, -dy)
