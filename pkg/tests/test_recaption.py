import random
import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import rec
from vecap.llmclient import RetryPolicy
from vecap.mockllm import MockRule
from vecap.recaption import (
    FUSION_INSTRUCTION,
    EmptyVec,
    PipelineError,
    RecaptionConfig,
    build_fusion_prompt,
    build_vec_prompt,
    detect_refusal,
    fusion_alttext,
    recaption_record,
    recaption_shard,
    truncate_alttext,
)
from vecap.shardio import read_records, write_records

GOLDEN_FUSION = (
    "Rephrase the following two sentences into one short sentence while adhering to the provided "
    'instructions: Place attributes before noun entities without introducing new meaning. Do not start '
    'with "The image". 1. Ring Capri Pomellato; 2. A delicate white ring on a white background'
)


class TestPrompts:
    def test_vec_prompt_golden(self):
        assert build_vec_prompt() == "Describe the image concisely, less than 20 words"
        assert build_vec_prompt() == build_vec_prompt()

    def test_fusion_prompt_golden(self):
        got = build_fusion_prompt("Ring Capri Pomellato", "A delicate white ring on a white background")
        assert got == GOLDEN_FUSION

    def test_fusion_prompt_vec_only(self):
        got = build_fusion_prompt("", "A red barn in a field")
        assert got == FUSION_INSTRUCTION + " 1. A red barn in a field"
        assert "2." not in got

    @pytest.mark.parametrize("vec", ["", "   "])
    def test_empty_vec(self, vec):
        with pytest.raises(EmptyVec):
            build_fusion_prompt("alt", vec)


class TestRefusal:
    @pytest.mark.parametrize(
        "text,expected",
        [
            ("I am sorry that I cannot describe this.", True),
            ("A sunny beach with palm trees.", False),
            ("I'M SORRY, no.", True),
            ("   i cannot help with that", True),
            ("As an AI language model, I ...", True),
            ("I’m sorry, but no", True),
            ("Sorry state of a house", False),
            ("The man said I am sorry", False),
        ],
    )
    def test_detect(self, text, expected):
        assert detect_refusal(text) is expected

    def test_custom_markers(self):
        assert detect_refusal("Nope.", ["nope"])
        assert not detect_refusal("I am sorry", ["nope"])


class TestTruncate:
    def test_short_unchanged(self):
        assert truncate_alttext("short caption", 300) == ("short caption", False)

    def test_400_chars_word_boundary(self):
        words = [f"word{i:03d}" for i in range(60)]
        alt = " ".join(words)[:400]
        assert len(alt) == 400
        out, flag = truncate_alttext(alt, 300)
        assert flag
        assert len(out) <= 300
        # independent boundary check: output is a whole-word prefix of the input
        assert alt.startswith(out)
        assert alt[len(out)] == " "
        assert out.split() == alt.split()[: len(out.split())]
        # and no longer whole-word prefix fits
        next_end = alt.find(" ", len(out) + 1)
        assert next_end == -1 or next_end > 300

    def test_hard_cut(self):
        alt = "x" * 50
        assert truncate_alttext(alt, 20) == ("x" * 20, True)

    def test_whitespace_at_limit(self):
        alt = "a" * 20 + " tail"
        assert truncate_alttext(alt, 20) == ("a" * 20, True)

    def test_min_limit(self):
        with pytest.raises(ValueError):
            truncate_alttext("abc", 19)

    @given(st.text(min_size=0, max_size=600), st.integers(20, 400))
    def test_never_exceeds(self, alt, limit):
        out, flag = truncate_alttext(alt, limit)
        assert len(out) <= limit
        assert flag == (len(alt) > limit)
        assert alt.startswith(out)


def test_fusion_alttext_prefers_hcs():
    assert fusion_alttext(rec(1, alt=("a", "b", "c"), alt_scores=(0.2, 0.9, 0.5))) == "b"
    assert fusion_alttext(rec(1, alt=("a", "b"))) == "a"


class TestRecaptionRecord:
    def test_basic(self, client, make_server):
        captioner = make_server(MockRule(respond="A white-roofed house with a porch"))
        fuser = make_server(MockRule(match="Rephrase", respond="fused: {prompt}"))
        out = recaption_record(rec(1, alt=("a house",)), RecaptionConfig(), captioner.url, fuser.url, client)
        assert out.vec == "A white-roofed house with a porch"
        assert out.vecap == "fused: " + build_fusion_prompt("a house", "A white-roofed house with a porch")
        assert out.flags == frozenset()
        assert captioner.log[0].prompts == (build_vec_prompt(),)

    def test_refusal_fallback(self, client, make_server):
        captioner = make_server(MockRule(respond="A knife on a table"))
        fuser = make_server(MockRule(match="forbidden", refusal=True))
        out = recaption_record(rec(1, alt=("forbidden words",)), RecaptionConfig(), captioner.url, fuser.url, client)
        assert out.flags == {"refusal_fallback"}
        # echo mock: the fallback prompt is the caption-only template
        assert out.vecap == build_fusion_prompt("", "A knife on a table")
        assert "forbidden" not in out.vecap
        assert len(fuser.log) == 2

    def test_double_refusal_keeps_caption(self, client, make_server):
        captioner = make_server(MockRule(respond="A thing"))
        fuser = make_server(MockRule(refusal=True))
        out = recaption_record(rec(1), RecaptionConfig(), captioner.url, fuser.url, client)
        assert out.vecap == "A thing"
        assert "refusal_fallback" in out.flags

    def test_truncation(self, client, make_server):
        captioner = make_server(MockRule(respond="A cat"))
        fuser = make_server()
        long_alt = ("lorem ipsum " * 40).strip()
        out = recaption_record(rec(1, alt=(long_alt,)), RecaptionConfig(), captioner.url, fuser.url, client)
        assert out.flags == {"alttext_truncated"}
        prompt = fuser.log[0].prompts[0]
        alt_part = re.match(re.escape(FUSION_INSTRUCTION) + r" 1\. (.*); 2\. A cat$", prompt).group(1)
        assert len(alt_part) <= 300

    def test_idempotent(self, client, echo_server):
        done = rec(1, vec="v", vecap="c")
        assert recaption_record(done, RecaptionConfig(), echo_server.url, echo_server.url, client) is done
        assert echo_server.log == []

    def test_existing_vec_reused(self, client, make_server):
        captioner = make_server()
        fuser = make_server(MockRule(respond="fused"))
        out = recaption_record(rec(1, vec="given"), RecaptionConfig(), captioner.url, fuser.url, client)
        assert (out.vec, out.vecap) == ("given", "fused")
        assert captioner.log == []

    def test_errors_carry_record_id(self, client, make_server, fast_policy):
        down = make_server(MockRule(status=503))
        with pytest.raises(PipelineError) as err:
            recaption_record(rec(7), RecaptionConfig(), down.url, down.url, client, fast_policy)
        assert err.value.record_id == "r0007"


def test_config_validation():
    with pytest.raises(ValueError):
        RecaptionConfig(max_alttext_chars=10)
    with pytest.raises(ValueError):
        RecaptionConfig(refusal_markers=())


class TestShard:
    def _shard(self, tmp_path, records):
        path = tmp_path / "in.jsonl"
        write_records(path, records)
        return path

    def test_all_succeed(self, tmp_path, client, pipeline_servers):
        captioner, fuser = pipeline_servers
        src = self._shard(tmp_path, [rec(i) for i in range(10)])
        stats = recaption_shard(src, tmp_path / "out.jsonl", RecaptionConfig(), captioner.url, fuser.url, client,
                                batch_size=4, workers=2)
        out = list(read_records(tmp_path / "out.jsonl"))
        assert [r.record_id for r in out] == [f"r{i:04d}" for i in range(10)]
        assert all(r.vec == f"A detailed view of img/{i}.jpg" for i, r in enumerate(out))
        assert all(r.vecap for r in out)
        assert (stats.refusals, stats.truncations, stats.failed, stats.enriched) == (0, 0, 0, 10)
        # 10 records / batch 4 -> 3 captioner and 3 fuser requests
        assert len(captioner.log) == 3 and len(fuser.log) == 3

    def test_one_refusal(self, tmp_path, client, pipeline_servers):
        captioner, fuser = pipeline_servers
        records = [rec(i, alt=("forbidden thing",) if i == 3 else None) for i in range(10)]
        src = self._shard(tmp_path, records)
        stats = recaption_shard(src, tmp_path / "out.jsonl", RecaptionConfig(), captioner.url, fuser.url, client)
        out = list(read_records(tmp_path / "out.jsonl"))
        assert stats.refusals == 1 and len(out) == 10
        assert out[3].flags == {"refusal_fallback"}
        assert all(not r.flags for i, r in enumerate(out) if i != 3)

    def test_captioner_down(self, tmp_path, client, make_server, fast_policy):
        down = make_server(MockRule(status=503))
        fuser = make_server()
        src = self._shard(tmp_path, [rec(i) for i in range(10)])
        stats = recaption_shard(src, tmp_path / "out.jsonl", RecaptionConfig(), down.url, fuser.url, client,
                                batch_size=4, workers=2, policy=fast_policy)
        out = list(read_records(tmp_path / "out.jsonl"))
        assert len(out) == 10 and stats.failed == 10
        assert all(r.flags == {"failed"} and r.vec is None for r in out)
        assert fuser.log == []

    def test_partial_failure_and_resume(self, tmp_path, client, make_server, fast_policy):
        captioner = make_server(MockRule(match="Describe", respond="cap"))
        fuser = make_server(MockRule(match="poison", status=500, times=3))
        records = [rec(i, alt=("poison",) if i == 5 else None) for i in range(8)]
        src = self._shard(tmp_path, records)
        first = recaption_shard(src, tmp_path / "a.jsonl", RecaptionConfig(), captioner.url, fuser.url, client,
                                batch_size=2, workers=2, policy=fast_policy)
        assert first.failed == 2  # the batch holding r0004 and r0005
        mid = list(read_records(tmp_path / "a.jsonl"))
        assert [r.record_id for r in mid] == [r.record_id for r in records]
        second = recaption_shard(tmp_path / "a.jsonl", tmp_path / "b.jsonl", RecaptionConfig(), captioner.url,
                                 fuser.url, client, batch_size=2, workers=2, policy=fast_policy)
        assert (second.skipped, second.enriched, second.failed) == (6, 2, 0)
        final = list(read_records(tmp_path / "b.jsonl"))
        assert all(r.vecap and "failed" not in r.flags for r in final)

    def test_missing_input_raises(self, tmp_path, client, echo_server):
        with pytest.raises(OSError):
            recaption_shard(tmp_path / "nope.jsonl", tmp_path / "out.jsonl", RecaptionConfig(),
                            echo_server.url, echo_server.url, client)

    def test_malformed_lines_counted(self, tmp_path, client, pipeline_servers):
        captioner, fuser = pipeline_servers
        src = tmp_path / "in.jsonl"
        write_records(src, [rec(0)])
        with open(src, "a") as fh:
            fh.write('{"record_id": "bad"}\n')
        stats = recaption_shard(src, tmp_path / "out.jsonl", RecaptionConfig(), captioner.url, fuser.url, client)
        assert stats.malformed == 1 and stats.records == 1


@pytest.mark.parametrize("seed", range(5))
def test_cardinality_and_order_under_random_mock_behaviour(tmp_path, client, make_server, seed):
    r = random.Random(seed)
    records = [rec(i, alt=(r.choice(["forbidden x", "plain y", "z" * 350, "fail q"]),)) for i in range(30)]
    captioner = make_server(MockRule(respond="cap", jitter_ms=5), seed=seed)
    fuser = make_server(
        MockRule(match="forbidden", refusal=True),
        MockRule(match="fail q", status=503, times=r.randint(0, 6)),
        seed=seed,
    )
    src = tmp_path / "in.jsonl"
    write_records(src, records)
    recaption_shard(src, tmp_path / "out.jsonl", RecaptionConfig(), captioner.url, fuser.url, client,
                    batch_size=r.randint(1, 8), workers=r.randint(1, 3),
                    policy=RetryPolicy(max_attempts=2, base_delay=0, max_delay=0))
    out = list(read_records(tmp_path / "out.jsonl"))
    assert [x.record_id for x in out] == [x.record_id for x in records]
