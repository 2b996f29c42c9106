import numpy as np
import pytest
import torch

from config import ModelConfig, RunConfig, TrainingConfig, InferenceConfig
from knowledge import KnowledgeRecord
from text_prior import HashTextEncoder, PriorEmbeddingSet, encode_priors

CLASS_NAMES = ["liver", "stomach", "aorta"]


@pytest.fixture(autouse=True)
def isolated_log_file(tmp_path, monkeypatch):
    monkeypatch.setenv("TAK_LOG_FILE", str(tmp_path / "log.txt"))
    monkeypatch.delenv("TAK_MLLM_ENDPOINT", raising=False)


@pytest.fixture
def records():
    return [
        KnowledgeRecord(
            class_id=i,
            class_name=name,
            position_text=f"The {name} lies near other organs. It is in the abdomen.",
            shape_text=f"The {name} has a smooth contour.",
            source="curated",
            validated=True,
        )
        for i, name in enumerate(CLASS_NAMES, start=1)
    ]


def make_tiny_config(**top) -> RunConfig:
    config = RunConfig(
        class_names=list(CLASS_NAMES),
        training=TrainingConfig(
            patch_size=(8, 8, 8),
            n_labeled=1,
            n_unlabeled=1,
            lambda_n=6,
            epochs=2,
            iterations_per_epoch=3,
            checkpoint_every=1,
            contrast_start_epoch=0,
            seed=7,
        ),
        model=ModelConfig(
            stages=2,
            base_width=2,
            head_hidden=(4,),
            contrast_scales=(1, 2),
            text_dim=8,
        ),
        inference=InferenceConfig(window=(8, 8, 8), stride=(4, 4, 4)),
    )
    for key, value in top.items():
        setattr(config, key, value)
    return config.validate()


@pytest.fixture
def tiny_config():
    return make_tiny_config()


def make_priors(text_dim: int = 8, records_list=None) -> PriorEmbeddingSet:
    if records_list is None:
        records_list = [
            KnowledgeRecord(i, name, f"{name} position.", f"{name} shape.", "curated", True)
            for i, name in enumerate(CLASS_NAMES, start=1)
        ]
    return encode_priors(records_list, HashTextEncoder(dim=text_dim, seed=0), "position+shape")


@pytest.fixture
def tiny_priors():
    return make_priors()


def make_labeled_volume(shape=(16, 16, 16), seed=0):
    """Том с тремя кубическими «органами» и шумом."""
    rng = np.random.default_rng(seed)
    label = np.zeros(shape, dtype=np.int64)
    label[2:8, 2:8, 2:8] = 1
    label[9:14, 3:7, 8:13] = 2
    label[4:6, 10:14, 2:14] = 3
    image = (label * 0.5 + 0.1 * rng.standard_normal(shape)).astype(np.float32)
    return image, label


@pytest.fixture
def labeled_volume():
    return make_labeled_volume()


@pytest.fixture
def double_precision():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


def make_small_spec(max_retries: int = 500):
    """Три органа в сетке 16³, имена совпадают с CLASS_NAMES."""
    from phantom_data import OrganSpec, PhantomSpec, RelationSpec

    return PhantomSpec(
        organs=[
            OrganSpec("liver", "ellipsoid", (0.05, 0.09), 1.0, 0.1),
            OrganSpec("stomach", "ellipsoid", (0.02, 0.04), 0.5, 0.1),
            OrganSpec("aorta", "tube", (0.01, 0.03), 1.6, 0.1),
        ],
        relations=[RelationSpec("stomach", "liver", "left")],
        grid=(16, 16, 16),
        max_retries=max_retries,
    ).validate()
