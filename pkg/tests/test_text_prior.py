import numpy as np
import pytest
import torch

from errors import EncodingFailed, FormatError, MissingInput
from knowledge import KnowledgeRecord
from tak_model import TAKNet
from text_prior import (
    CACHE_HEADER,
    HashTextEncoder,
    PriorProjector,
    encode_priors,
    load_embedding_cache,
    project_to_scales,
    save_embedding_cache,
)


class BrokenEncoder:
    dim = 4

    def encode(self, text):
        return np.full(4, np.nan)


def test_hash_encoder_is_deterministic_and_unit_norm():
    encoder = HashTextEncoder(dim=64, seed=3)
    first, second = encoder.encode("liver"), encoder.encode("liver")
    assert first.dtype == np.float32
    assert np.array_equal(first, second)
    assert np.linalg.norm(first) == pytest.approx(1.0, abs=1e-6)
    assert not np.array_equal(first, encoder.encode("aorta"))
    assert not np.array_equal(first, HashTextEncoder(dim=64, seed=4).encode("liver"))


def test_encode_priors_orders_by_class_id(records):
    embeddings = encode_priors(list(reversed(records)), HashTextEncoder(dim=16), "position+shape")
    assert embeddings.class_names == ["liver", "stomach", "aorta"]
    assert embeddings.text_p.shape == (3, 16)
    assert not np.array_equal(embeddings.text_p, embeddings.text_s)


def test_name_prompt_fills_both_slots(records):
    embeddings = encode_priors(records, HashTextEncoder(dim=16), "name")
    assert np.array_equal(embeddings.text_p, embeddings.text_s)


def test_encoding_failures(records):
    with pytest.raises(EncodingFailed):
        encode_priors([], HashTextEncoder(dim=4))
    with pytest.raises(EncodingFailed) as info:
        encode_priors(records, BrokenEncoder())
    assert info.value.class_name == "liver"


def test_projection_rows_are_unit_norm(tiny_priors):
    projected = project_to_scales(tiny_priors, {1: 2, 2: 4})
    assert projected.scales == (1, 2)
    for scale, width in ((1, 2), (2, 4)):
        assert projected.proj_p[scale].shape == (3, width)
        norms = projected.proj_s[scale].norm(dim=-1)
        torch.testing.assert_close(norms, torch.ones(3))


def test_projection_respects_given_projector(tiny_priors):
    projector = PriorProjector(8, {3: 5})
    with pytest.raises(ValueError):
        project_to_scales(tiny_priors, {2: 5}, projector)


def test_cache_round_trip_is_bit_exact(tmp_path, tiny_priors):
    path = tmp_path / "emb.bin"
    save_embedding_cache(tiny_priors, path)
    loaded = load_embedding_cache(path, tiny_priors.class_names)
    assert np.array_equal(loaded.text_p, tiny_priors.text_p)
    assert np.array_equal(loaded.text_s, tiny_priors.text_s)
    again = tmp_path / "again.bin"
    save_embedding_cache(loaded, again)
    assert path.read_bytes() == again.read_bytes()


def test_cache_validation(tmp_path, tiny_priors):
    with pytest.raises(MissingInput):
        load_embedding_cache(tmp_path / "absent.bin")

    path = tmp_path / "emb.bin"
    save_embedding_cache(tiny_priors, path)
    raw = path.read_bytes()

    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_embedding_cache(tmp_path / "magic.bin")

    (tmp_path / "short.bin").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        load_embedding_cache(tmp_path / "short.bin")

    with pytest.raises(FormatError):
        load_embedding_cache(path, ["liver", "stomach"])

    assert len(raw) == CACHE_HEADER.size + 3 * 2 * 8 * 4


def test_model_projection_matches_project_to_scales(tiny_config, tiny_priors):
    torch.manual_seed(0)
    model = TAKNet(tiny_config.model, tiny_priors)
    proj_p, proj_s = model.project_priors()
    projected = project_to_scales(tiny_priors, model.projector.scale_widths, model.projector)
    assert sorted(proj_p) == list(tiny_config.model.contrast_scales)
    for scale in proj_p:
        torch.testing.assert_close(proj_p[scale], projected.proj_p[scale])
        torch.testing.assert_close(proj_s[scale], projected.proj_s[scale])
