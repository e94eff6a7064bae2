import numpy as np
import pytest
import torch

from sketchmatch.corpus import build_corpus
from sketchmatch.encoders import IdentityEncoder, SemanticEncoder, TextEncoder
from sketchmatch.manifest import filter_entries
from sketchmatch.synthesis import style_captions
from sketchmatch.training import load_images

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """10 identities x (2 photos + 8 sketches); enough for contract tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    entries = build_corpus(10, 2, 8, seed=7, out_dir=root)
    return root, entries


@pytest.fixture(scope="session")
def tiny_encoders(tiny_corpus):
    """Quickly fitted encoders; good for contracts, not for accuracy gates."""
    root, entries = tiny_corpus
    train = filter_entries(entries, split="train")
    photos = filter_entries(train, modality="photo")
    images = load_images(photos, root)
    ids = sorted({e.id for e in photos})
    remap = {v: k for k, v in enumerate(ids)}
    labels = np.array([remap[e.id] for e in photos])

    text_enc = TextEncoder(steps=60, seed=0)
    caps = style_captions()
    text_enc.fit([caps[s] for s in sorted(caps)], sorted(caps))

    identity_enc = IdentityEncoder(epochs=4, batch_size=16, seed=0)
    identity_enc.fit(images, labels)

    all_train = sorted(train, key=lambda e: e.path)
    sem_images = load_images(all_train, root)
    sem_labels = np.array([0 if e.modality == "photo" else 1 + e.style for e in all_train])
    semantic_enc = SemanticEncoder(epochs=2, batch_size=16, seed=0)
    semantic_enc.fit(sem_images, sem_labels)
    return text_enc, semantic_enc, identity_enc
