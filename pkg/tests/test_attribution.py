import numpy as np
import pytest
import torch

from octbiomark.attribution import (
    batch_attribute,
    fit_probe,
    gradcam,
    load_probe,
    save_map_png,
    save_overlay_png,
    save_probe,
)
from octbiomark.ssl.encoder import ConvEncoder, EncoderSpec

TINY = EncoderSpec(input_size=(16, 16), channels=(4, 8), strides=(2, 2), embed_dim=8)


def separable_data(n_per=30, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0, 0.0], [6.0, 0.0, 0.0], [0.0, 6.0, 0.0]])
    x = np.concatenate([c + rng.normal(scale=0.3, size=(n_per, 3)) for c in centers])
    y = np.repeat(np.arange(3), n_per)
    return x, y


def test_probe_separable_reaches_full_accuracy():
    x, y = separable_data()
    probe = fit_probe(x, y, k=3)
    assert probe.training_accuracy == 1.0
    assert probe.classes == (0, 1, 2)
    assert probe.missing_clusters == ()


def test_probe_missing_cluster_stays_zero_and_never_predicted():
    x, y = separable_data()
    probe = fit_probe(x, y, k=5)
    assert probe.missing_clusters == (3, 4)
    assert np.all(probe.weight[3] == 0.0)
    assert np.all(probe.weight[4] == 0.0)
    assert probe.bias[3] == 0.0 and probe.bias[4] == 0.0
    predictions = probe.predict(np.random.default_rng(1).normal(size=(50, 3)))
    assert not set(predictions.tolist()) & {3, 4}


def test_probe_gradient_small_at_optimum():
    x, y = separable_data(n_per=20)
    probe = fit_probe(x, y, k=3, grad_tol=1e-7)
    # recompute the objective gradient at the solution
    w = probe.weight
    b = probe.bias
    logits = x @ w.T + b
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(y)), y] = 1.0
    gw = (probs - onehot).T @ x / len(y) + 1e-4 * w
    assert np.abs(gw).max() < 1e-5


def test_probe_roundtrip_and_canonical_bytes(tmp_path):
    x, y = separable_data(n_per=10)
    probe = fit_probe(x, y, k=4)
    path = tmp_path / "probe.obpr"
    save_probe(probe, path)
    loaded = load_probe(path)
    assert np.array_equal(loaded.weight, probe.weight)
    assert np.array_equal(loaded.bias, probe.bias)
    assert loaded.classes == probe.classes
    assert loaded.missing_clusters == probe.missing_clusters
    assert loaded.training_accuracy == probe.training_accuracy
    first = path.read_bytes()
    save_probe(loaded, path)
    assert path.read_bytes() == first


def test_probe_file_checksum(tmp_path):
    x, y = separable_data(n_per=5)
    probe = fit_probe(x, y, k=3)
    path = tmp_path / "probe.obpr"
    save_probe(probe, path)
    blob = bytearray(path.read_bytes())
    blob[-40] ^= 0x02
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        load_probe(path)


@pytest.fixture(scope="module")
def tiny_encoder_and_probe():
    encoder = ConvEncoder(TINY, seed=2)
    encoder.eval()
    rng = np.random.default_rng(3)
    images = rng.integers(0, 256, size=(12, 16, 16), dtype=np.uint8)
    with torch.no_grad():
        feats = encoder.forward_features(
            torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
        ).numpy()
    labels = (feats[:, 0] > np.median(feats[:, 0])).astype(int)
    probe = fit_probe(feats.astype(np.float64), labels, k=2)
    return encoder, probe, images


def test_gradcam_map_contract(tiny_encoder_and_probe):
    encoder, probe, images = tiny_encoder_and_probe
    amap = gradcam(encoder, probe, images[0], cluster_index=1, image_id="x")
    assert amap.values.shape == (16, 16)
    assert amap.values.min() >= 0.0
    assert amap.values.max() <= 1.0
    assert amap.layers == TINY.gradcam_layers


def test_gradcam_scale_invariant_to_probe_rescale(tiny_encoder_and_probe):
    encoder, probe, images = tiny_encoder_and_probe
    base = gradcam(encoder, probe, images[1], cluster_index=0)
    scaled_probe = type(probe)(
        weight=probe.weight * 10.0,
        bias=probe.bias * 10.0,
        classes=probe.classes,
        training_accuracy=probe.training_accuracy,
        missing_clusters=probe.missing_clusters,
    )
    rescaled = gradcam(encoder, scaled_probe, images[1], cluster_index=0)
    assert np.allclose(base.values, rescaled.values, atol=1e-6)


def test_gradcam_rejects_bad_cluster(tiny_encoder_and_probe):
    encoder, probe, images = tiny_encoder_and_probe
    with pytest.raises(IndexError):
        gradcam(encoder, probe, images[0], cluster_index=7)


def test_gradcam_is_deterministic(tiny_encoder_and_probe):
    encoder, probe, images = tiny_encoder_and_probe
    a = gradcam(encoder, probe, images[2], cluster_index=1)
    b = gradcam(encoder, probe, images[2], cluster_index=1)
    assert np.array_equal(a.values, b.values)


def test_png_writers(tiny_encoder_and_probe, tmp_path):
    encoder, probe, images = tiny_encoder_and_probe
    amap = gradcam(encoder, probe, images[0], cluster_index=1)
    save_map_png(amap, tmp_path / "m.png")
    save_overlay_png(images[0], amap, tmp_path / "o.png")
    from PIL import Image

    m = np.asarray(Image.open(tmp_path / "m.png"))
    o = np.asarray(Image.open(tmp_path / "o.png"))
    assert m.shape == (16, 16)
    assert o.shape == (16, 16, 3)


def test_batch_attribute_isolates_failures(tiny_encoder_and_probe, tmp_path):
    encoder, probe, images = tiny_encoder_and_probe
    image_map = {"good1": images[0], "good2": images[1], "bad": images[2][:8]}
    assignments = {"good1": 0, "good2": 1, "bad": 0}
    written, failures = batch_attribute(encoder, probe, image_map, assignments, tmp_path)
    assert set(failures) == {"bad"}
    names = {p.name for p in written}
    assert names == {
        "good1.attr.png",
        "good1.overlay.png",
        "good2.attr.png",
        "good2.overlay.png",
    }
