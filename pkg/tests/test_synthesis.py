import hashlib

import numpy as np
import pytest

from sketchmatch.backbone import ConditionalDenoiser, ModelConfig
from sketchmatch.corpus import load_png
from sketchmatch.diffusion import make_schedule
from sketchmatch.manifest import filter_entries, parse_manifest
from sketchmatch.synthesis import (
    Generators,
    audit_summary,
    generate_sketch,
    style_catalog,
    style_captions,
    synthesize_dataset,
)

PAPER_PROMPTS = (
    "a viewed software-generated sketch of a face",
    "a software-generated sketch of a face",
    "a viewed hand-drawn sketch of a face",
    "a hand-drawn sketch of a face",
)


class TestStyleCatalog:
    def test_fixed_size_and_distinct_captions(self):
        catalog = style_catalog()
        assert len(catalog) == 8
        captions = [p.caption for p in catalog]
        assert len(set(captions)) == 8
        assert [p.style_id for p in catalog] == list(range(8))

    @pytest.mark.parametrize("prompt", PAPER_PROMPTS)
    def test_reference_prompts_present(self, prompt):
        assert prompt in {p.caption for p in style_catalog()}

    def test_family_tags(self):
        catalog = style_catalog()
        assert all(p.medium == "hand-drawn" for p in catalog[:4])
        assert all(p.medium == "software-generated" for p in catalog[4:])
        assert sum(p.viewed for p in catalog) == 4


@pytest.fixture(scope="module")
def tiny_generators(tiny_encoders):
    text_enc, sem_enc, ident_enc = tiny_encoders
    model = ConditionalDenoiser(ModelConfig(seed=2))
    model.eval().requires_grad_(False)
    return Generators(
        model=model, schedule=make_schedule(40),
        text_encoder=text_enc, semantic_encoder=sem_enc, identity_encoder=ident_enc,
    )


@pytest.fixture(scope="module")
def mugshot(tiny_corpus):
    root, entries = tiny_corpus
    photo = sorted(filter_entries(entries, modality="photo"), key=lambda e: e.path)[0]
    return load_png(root / photo.path)


class TestGenerateSketch:
    def test_deterministic(self, tiny_generators, mugshot):
        style = style_catalog()[1]
        img_a, rec_a = generate_sketch(mugshot, style, tiny_generators, seed=5, num_steps=6)
        img_b, rec_b = generate_sketch(mugshot, style, tiny_generators, seed=5, num_steps=6)
        np.testing.assert_array_equal(img_a, img_b)
        assert rec_a.identity_similarity == rec_b.identity_similarity

    def test_similarity_in_cosine_range(self, tiny_generators, mugshot):
        for seed in (0, 1):
            _, rec = generate_sketch(mugshot, style_catalog()[0], tiny_generators,
                                     seed=seed, num_steps=6)
            assert -1.0 <= rec.identity_similarity <= 1.0

    def test_flagging_respects_floor(self, tiny_generators, mugshot):
        _, rec = generate_sketch(mugshot, style_catalog()[2], tiny_generators,
                                 seed=3, num_steps=6, audit_floor=1.1)
        assert rec.flagged  # nothing reaches cosine > 1.1


class TestSynthesizeDataset:
    def _sources(self, tiny_corpus, n=4):
        root, entries = tiny_corpus
        photos = filter_entries(entries, modality="photo")
        keep_ids = sorted({e.id for e in photos})[:n]
        return root, [e for e in entries if e.id in keep_ids]

    def test_record_arithmetic(self, tiny_corpus, tiny_generators, tmp_path):
        root, sources = self._sources(tiny_corpus)
        produced = synthesize_dataset(
            sources, root, tiny_generators, tmp_path / "synth",
            styles=[0, 3, 5], seeds_per_style=2, num_steps=4,
        )
        assert len(produced) == 4 * 3 * 2
        per_id = {}
        for e in produced:
            per_id.setdefault(e.id, []).append((e.style, e.extras["seed_index"]))
        assert all(sorted(v) == sorted(per_id[produced[0].id]) for v in per_id.values())

    def test_resume_after_interrupt_is_byte_identical(self, tiny_corpus, tiny_generators, tmp_path):
        root, sources = self._sources(tiny_corpus, n=3)
        kwargs = dict(styles=[1, 4], seeds_per_style=1, num_steps=4)

        synthesize_dataset(sources, root, tiny_generators, tmp_path / "full", **kwargs)
        synthesize_dataset(sources, root, tiny_generators, tmp_path / "interrupted",
                           limit=2, **kwargs)
        partial = parse_manifest(tmp_path / "interrupted" / "manifest.jsonl")
        assert len(partial) == 2
        synthesize_dataset(sources, root, tiny_generators, tmp_path / "interrupted", **kwargs)

        full_bytes = (tmp_path / "full" / "manifest.jsonl").read_bytes()
        resumed_bytes = (tmp_path / "interrupted" / "manifest.jsonl").read_bytes()
        assert full_bytes == resumed_bytes
        for p in sorted((tmp_path / "full" / "images").glob("*.png")):
            q = tmp_path / "interrupted" / "images" / p.name
            assert hashlib.sha256(p.read_bytes()).digest() == hashlib.sha256(q.read_bytes()).digest()

    def test_rerun_skips_existing_and_matches(self, tiny_corpus, tiny_generators, tmp_path):
        root, sources = self._sources(tiny_corpus, n=2)
        kwargs = dict(styles=[2], seeds_per_style=1, num_steps=4)
        first = synthesize_dataset(sources, root, tiny_generators, tmp_path / "s", **kwargs)
        again = synthesize_dataset(sources, root, tiny_generators, tmp_path / "s", **kwargs)
        assert [e.to_json() for e in first] == [e.to_json() for e in again]

    def test_output_joins_to_input_on_source_id(self, tiny_corpus, tiny_generators, tmp_path):
        root, sources = self._sources(tiny_corpus, n=3)
        produced = synthesize_dataset(sources, root, tiny_generators, tmp_path / "j",
                                      styles=[0], seeds_per_style=1, num_steps=4)
        source_ids = {e.id for e in sources}
        assert all(e.id in source_ids for e in produced)
        assert all("source_path" in e.extras for e in produced)

    def test_unknown_style_rejected(self, tiny_corpus, tiny_generators, tmp_path):
        root, sources = self._sources(tiny_corpus, n=1)
        with pytest.raises(ValueError, match="unknown style"):
            synthesize_dataset(sources, root, tiny_generators, tmp_path / "x", styles=[9])

    def test_audit_summary(self, tiny_corpus, tiny_generators, tmp_path):
        root, sources = self._sources(tiny_corpus, n=2)
        produced = synthesize_dataset(sources, root, tiny_generators, tmp_path / "a",
                                      styles=[0, 1], seeds_per_style=1, num_steps=4,
                                      audit_floor=2.0)
        summary = audit_summary(produced)
        assert summary["records"] == 4
        assert summary["flagged_fraction"] == 1.0


def test_style_captions_align_with_catalog():
    caps = style_captions()
    assert caps == {p.style_id: p.caption for p in style_catalog()}
