"""Byte-level tokenization and corpus handling.

Corpus files are newline-delimited UTF-8 records:

    response text                  -> unconditional sample
    prompt<TAB>response text       -> prompt conditioning + supervised response
    COT<TAB>[prompt<TAB>]response  -> response wrapped in <think>...</think>

Token ids 0..255 are raw bytes; ids 256..259 are the specials (eos, mask,
think-open, think-close), so the vocabulary is 260 ids with every id <= 259.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EOS_ID = 256
MASK_ID = 257
THINK_OPEN_ID = 258
THINK_CLOSE_ID = 259
VOCAB_SIZE = 260

_SPECIAL_TEXT = {
    EOS_ID: "<eos>",
    MASK_ID: "<mask>",
    THINK_OPEN_ID: "<think>",
    THINK_CLOSE_ID: "</think>",
}


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_tokens(ids, show_eos: bool = False) -> str:
    """Render token ids back to text; specials become readable markers."""
    out: list[str] = []
    pending: list[int] = []

    def flush():
        if pending:
            out.append(bytes(pending).decode("utf-8", errors="replace"))
            pending.clear()

    for i in ids:
        i = int(i)
        if i < 256:
            pending.append(i)
        else:
            flush()
            if i == EOS_ID and not show_eos:
                continue
            out.append(_SPECIAL_TEXT.get(i, f"<{i}>"))
    flush()
    return "".join(out)


@dataclass
class TokenSequence:
    """One tokenized sample: ids, conditioning prefix length, and role."""

    tokens: np.ndarray
    prompt_len: int
    role: str = "plain"
    source_line: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if not 0 <= self.prompt_len <= self.tokens.size:
            raise ValueError(f"prompt_len {self.prompt_len} out of range for "
                             f"{self.tokens.size} tokens")
        if self.role == "cot":
            opens = int(np.sum(self.tokens == THINK_OPEN_ID))
            closes = int(np.sum(self.tokens == THINK_CLOSE_ID))
            if opens != closes or opens == 0:
                raise ValueError("cot sequence must contain matched think tokens")

    def __len__(self) -> int:
        return int(self.tokens.size)


class CorpusError(ValueError):
    pass


def parse_line(line: str, line_no: int, max_len: int | None = None) -> TokenSequence:
    role = "plain"
    body = line
    if body.startswith("COT\t"):
        role = "cot"
        body = body[len("COT\t"):]
    if "\t" in body:
        prompt_text, _, response_text = body.partition("\t")
    else:
        prompt_text, response_text = "", body
    if response_text == "":
        raise CorpusError(f"line {line_no}: empty response")
    if "\t" in response_text:
        raise CorpusError(f"line {line_no}: more than one tab separator")

    prompt = encode_text(prompt_text)
    response = encode_text(response_text)
    if role == "cot":
        response = [THINK_OPEN_ID] + response + [THINK_CLOSE_ID]
    tokens = prompt + response + [EOS_ID]

    if max_len is not None and len(tokens) > max_len:
        # Trim the response tail, keeping the eos and at least one
        # supervised token; oversize prompts are a hard error.
        overflow = len(tokens) - max_len
        if len(response) - overflow < 1:
            raise CorpusError(f"line {line_no}: prompt too long for max length {max_len}")
        response = response[: len(response) - overflow]
        if role == "cot" and response[-1] != THINK_CLOSE_ID:
            response[-1] = THINK_CLOSE_ID
        tokens = prompt + response + [EOS_ID]

    return TokenSequence(
        tokens=np.array(tokens, dtype=np.int64),
        prompt_len=len(prompt),
        role=role,
        source_line=line_no,
    )


def ingest_corpus(path: str, max_len: int | None = None) -> list[TokenSequence]:
    """Parse a corpus file; deterministic, errors carry the line number."""
    samples: list[TokenSequence] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line == "":
                continue
            samples.append(parse_line(line, line_no, max_len=max_len))
    if not samples:
        raise CorpusError(f"empty corpus: {path}")
    return samples


# --- bundled synthetic corpora -------------------------------------------
#
# The demo corpus is generated text: Zipf-weighted words arranged into short
# sentences, with a slice of tab-separated arithmetic QA lines so prompts
# get exercised. Deterministic in (seed, size).

_WORDS = (
    "the of and to in is was for on that with as his they at be this had not "
    "are but from or have an one all their there her can we what out other "
    "were which do their time if will how said each about them then she many "
    "some so these would into has more two like him see no could make than "
    "first been its who now people my made over did down only way find use "
    "may water long little very after words called just where most know get "
    "through back much before go good new write our used me man too any day "
    "same right look think also around another came come work three word must "
    "because does part even place well such here take why things help put "
    "years different away again off went old number great tell men say small "
    "every found still between name should home big give air line set own "
    "under read last never us left end along while might next sound below "
    "saw something thought both few those always looked show large often "
    "together asked house world going want school important until form food "
    "keep children feet land side without boy once animal life enough took "
    "four head above kind began almost live page got earth need far hand "
    "high year mother light country father let night picture being study "
    "second soon story since white ever paper hard near sentence better best "
    "across during today however sure knew tried told young sun thing whole "
    "hear example heard several change answer room sea against top turned "
    "learn point city play toward five himself usually money seen car morning "
    "im body upon family later turn move face door cut done group true half "
    "red fish plants living black eat short united run book gave order open "
    "ground cold really table remember tree course front american space "
).split()

_NUM_WORDS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]


def _zipf_weights(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


def _sentence(rng: np.random.Generator, weights: np.ndarray) -> str:
    n_words = int(rng.integers(4, 11))
    picks = rng.choice(len(_WORDS), size=n_words, p=weights)
    words = [_WORDS[i] for i in picks]
    words[0] = words[0].capitalize()
    return " ".join(words) + "."


def _qa_line(rng: np.random.Generator) -> str:
    a, b = int(rng.integers(0, 5)), int(rng.integers(0, 5))
    return (f"what is {_NUM_WORDS[a]} plus {_NUM_WORDS[b]}?\t"
            f"{_NUM_WORDS[a]} plus {_NUM_WORDS[b]} is {_NUM_WORDS[a + b]}.")


def _cot_line(rng: np.random.Generator) -> str:
    a, b = int(rng.integers(0, 5)), int(rng.integers(0, 5))
    return (f"COT\twhat is {_NUM_WORDS[a]} plus {_NUM_WORDS[b]}?\t"
            f"count {_NUM_WORDS[a]} then {_NUM_WORDS[b]} more to reach "
            f"{_NUM_WORDS[a + b]}. the answer is {_NUM_WORDS[a + b]}.")


def build_demo_corpus(
    path: str,
    target_bytes: int = 1_000_000,
    seed: int = 20240601,
    qa_every: int = 10,
    cot_every: int = 0,
) -> None:
    """Write a deterministic synthetic corpus of roughly target_bytes."""
    rng = np.random.default_rng(seed)
    weights = _zipf_weights(len(_WORDS))
    lines: list[str] = []
    total = 0
    i = 0
    while total < target_bytes:
        if cot_every and i % cot_every == cot_every - 1:
            line = _cot_line(rng)
        elif qa_every and i % qa_every == qa_every - 1:
            line = _qa_line(rng)
        else:
            line = _sentence(rng, weights)
            if rng.random() < 0.4:
                line += " " + _sentence(rng, weights)
        lines.append(line)
        total += len(line) + 1
        i += 1
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


MEMORIZE_LINE = "the quick brown fox jumps over the lazy dog"


def build_memorize_corpus(path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MEMORIZE_LINE + "\n")
