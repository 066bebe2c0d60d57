import numpy as np
import pytest

from zscir.backbone import StubBackbone
from zscir.concepts import ConceptVocabulary, synthetic_phrase_bank


@pytest.fixture(scope="session")
def backbone():
    return StubBackbone()


@pytest.fixture(scope="session")
def concept_names():
    return ["dog", "cat", "car", "tree", "house",
            "boat", "bird", "chair", "lamp", "river"]


@pytest.fixture(scope="session")
def vocab(backbone, concept_names):
    return ConceptVocabulary.from_backbone(concept_names, backbone)


@pytest.fixture(scope="session")
def phrase_bank(concept_names):
    return synthetic_phrase_bank(concept_names)


def random_images(n, seed=0, size=8):
    rng = np.random.default_rng(seed)
    return {f"img{i:03d}": rng.random((size, size, 3), dtype=np.float32)
            for i in range(n)}


@pytest.fixture(scope="session")
def small_corpus(backbone):
    images = random_images(20, seed=7)
    embeddings = {k: backbone.encode_image(v).numpy()
                  for k, v in images.items()}
    return images, embeddings
