"""Dataset ingestion, canonical text rendering, and tokenization.

Everything downstream (difficulty metrics, probes, the scheduler) consumes the
output of this module: samples loaded from JSONL, a deterministic corpus
tokenizer, and per-sample encoded token streams with output-position masks.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

UNK_ID = 0
UNK_TOKEN = "<unk>"

# Piece kinds for rendered text segments.
MARKER = "marker"
PROMPT = "prompt"
OUTPUT = "output"


class CorpusError(ValueError):
    """Raised for malformed input files or invariant violations."""


@dataclass(frozen=True)
class Turn:
    role: str  # "user" or "assistant"
    text: str


@dataclass
class InstructionSample:
    id: int
    instruction: str = ""
    input: str = ""
    output: str = ""
    turns: tuple[Turn, ...] = ()
    source: str = "general"

    @property
    def is_multi_turn(self) -> bool:
        return len(self.turns) > 0


@dataclass
class Dataset:
    samples: list[InstructionSample]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[InstructionSample]:
        return iter(self.samples)

    def by_id(self, sample_id: int) -> InstructionSample:
        return self._index()[sample_id]

    def _index(self) -> dict[int, InstructionSample]:
        idx = getattr(self, "_idx", None)
        if idx is None:
            idx = {s.id: s for s in self.samples}
            object.__setattr__(self, "_idx", idx)
        return idx

    def digest(self) -> str:
        """Stable content hash of the dataset (ids, fields, sources)."""
        h = hashlib.sha256()
        for s in self.samples:
            rec = {
                "id": s.id,
                "instruction": s.instruction,
                "input": s.input,
                "output": s.output,
                "turns": [[t.role, t.text] for t in s.turns],
                "source": s.source,
            }
            h.update(json.dumps(rec, sort_keys=True, ensure_ascii=False).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


@dataclass(frozen=True)
class Template:
    """Rendering markers; the defaults match the instruction/input/response form."""

    instruction: str = "### Instruction:\n"
    input: str = "### Input:\n"
    response: str = "### Response:\n"
    separator: str = "\n\n"

    @classmethod
    def from_file(cls, path: str) -> "Template":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {"instruction", "input", "response", "separator"}
        bad = set(raw) - known
        if bad:
            raise CorpusError(f"unknown template keys: {sorted(bad)}")
        return cls(**raw)


DEFAULT_TEMPLATE = Template()


class Vocab:
    """Token-string to id mapping with a reserved unknown id 0.

    Ids are assigned in first-seen order while the vocab is growing; once
    frozen, unseen tokens map to the unknown id.
    """

    def __init__(self) -> None:
        self._ids: dict[str, int] = {}
        self._strings: list[str] = [UNK_TOKEN]
        self._frozen = False

    def __len__(self) -> int:
        return len(self._strings)

    @property
    def size(self) -> int:
        return len(self._strings)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "Vocab":
        self._frozen = True
        return self

    def id_of(self, token: str) -> int:
        tid = self._ids.get(token)
        if tid is not None:
            return tid
        if self._frozen:
            return UNK_ID
        tid = len(self._strings)
        self._ids[token] = tid
        self._strings.append(token)
        return tid

    def string_of(self, token_id: int) -> str:
        return self._strings[token_id]


@dataclass
class TokenSequence:
    """Token ids plus the vocab that produced them; behaves like a sequence."""

    tokens: list[int]
    vocab: Vocab

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[int]:
        return iter(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]

    def strings(self) -> list[str]:
        return [self.vocab.string_of(t) for t in self.tokens]


def split_text(text: str) -> list[str]:
    """Deterministic whitespace+punctuation split into token strings."""
    return _TOKEN_RE.findall(text)


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    """Tokenize text against `vocab` (growing it unless frozen)."""
    return TokenSequence([vocab.id_of(t) for t in split_text(text)], vocab)


def render_pieces(sample: InstructionSample, template: Template = DEFAULT_TEMPLATE) -> list[tuple[str, str]]:
    """Rendered text as (text, kind) pieces, kind in {marker, prompt, output}.

    Piece boundaries always fall on whitespace, so tokenizing piece by piece
    equals tokenizing the concatenation; that alignment is what lets encode()
    mark output-token positions exactly.
    """
    pieces: list[tuple[str, str]] = []
    sep = ""
    if sample.is_multi_turn:
        for turn in sample.turns:
            marker = template.instruction if turn.role == "user" else template.response
            kind = PROMPT if turn.role == "user" else OUTPUT
            pieces.append((sep + marker, MARKER))
            pieces.append((turn.text, kind))
            sep = template.separator
    else:
        pieces.append((template.instruction, MARKER))
        pieces.append((sample.instruction, PROMPT))
        if sample.input:
            pieces.append((template.separator + template.input, MARKER))
            pieces.append((sample.input, PROMPT))
        pieces.append((template.separator + template.response, MARKER))
        pieces.append((sample.output, OUTPUT))
    return pieces


def render_text(sample: InstructionSample, template: Template = DEFAULT_TEMPLATE) -> str:
    return "".join(text for text, _ in render_pieces(sample, template))


@dataclass
class EncodedSample:
    """A sample's rendered token stream plus masks the probes need."""

    id: int
    tokens: list[int]
    output_mask: list[bool]
    text: str
    content_tokens: list[int]  # prompt+output tokens, markers excluded
    mask_from_char: int  # char offset of the first output piece in `text`

    @property
    def content_token_count(self) -> int:
        return len(self.content_tokens)

    @property
    def mask_from(self) -> int:
        """First output token position (== len(tokens) when no output tokens)."""
        for i, m in enumerate(self.output_mask):
            if m:
                return i
        return len(self.tokens)


def encode(sample: InstructionSample, vocab: Vocab, template: Template = DEFAULT_TEMPLATE) -> EncodedSample:
    tokens: list[int] = []
    mask: list[bool] = []
    content: list[int] = []
    text_parts: list[str] = []
    offset = 0
    mask_from_char = -1
    for text, kind in render_pieces(sample, template):
        ids = [vocab.id_of(t) for t in split_text(text)]
        tokens.extend(ids)
        mask.extend([kind == OUTPUT] * len(ids))
        if kind != MARKER:
            content.extend(ids)
        if kind == OUTPUT and mask_from_char < 0:
            mask_from_char = offset
        text_parts.append(text)
        offset += len(text)
    full_text = "".join(text_parts)
    if mask_from_char < 0:
        mask_from_char = len(full_text)
    return EncodedSample(
        id=sample.id,
        tokens=tokens,
        output_mask=mask,
        text=full_text,
        content_tokens=content,
        mask_from_char=mask_from_char,
    )


@dataclass
class EncodedCorpus:
    """Built vocab plus every sample's encoded stream; immutable after build."""

    dataset: Dataset
    vocab: Vocab
    by_id: dict[int, EncodedSample] = field(repr=False, default_factory=dict)

    @classmethod
    def build(cls, dataset: Dataset, template: Template = DEFAULT_TEMPLATE) -> "EncodedCorpus":
        vocab = Vocab()
        by_id = {s.id: encode(s, vocab, template) for s in dataset}
        vocab.freeze()
        return cls(dataset=dataset, vocab=vocab, by_id=by_id)

    def tokens_of(self, sample_id: int) -> list[int]:
        return self.by_id[sample_id].tokens


def _parse_turns(raw, line_no: int) -> tuple[Turn, ...]:
    if not isinstance(raw, list):
        raise CorpusError(f"line {line_no}: 'turns' must be an array")
    turns = []
    for k, item in enumerate(raw):
        if not isinstance(item, dict) or "role" not in item or "text" not in item:
            raise CorpusError(f"line {line_no}: turn {k} needs 'role' and 'text'")
        role = item["role"]
        if role not in ("user", "assistant"):
            raise CorpusError(f"line {line_no}: turn {k} role must be user/assistant, got {role!r}")
        expected = "user" if k % 2 == 0 else "assistant"
        if role != expected:
            raise CorpusError(f"line {line_no}: turns must alternate user/assistant starting with user")
        turns.append(Turn(role=role, text=str(item["text"])))
    return tuple(turns)


def load_records(lines: Sequence[str], default_source: str = "general", id_offset: int = 0) -> list[InstructionSample]:
    """Parse JSONL lines into samples; blank lines are skipped.

    Records without an explicit id get their position (plus id_offset) in
    order; explicit ids are kept as-is and validated by the caller.
    """
    samples: list[InstructionSample] = []
    pos = 0
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise CorpusError(f"line {line_no}: record must be a JSON object")
        turns = _parse_turns(rec["turns"], line_no) if rec.get("turns") else ()
        output = str(rec.get("output", "") or "")
        if not output and not turns:
            raise CorpusError(f"line {line_no}: record needs a non-empty 'output' or 'turns'")
        rec_id = rec.get("id")
        if rec_id is None:
            rec_id = id_offset + pos
        elif not isinstance(rec_id, int):
            raise CorpusError(f"line {line_no}: 'id' must be an integer")
        samples.append(
            InstructionSample(
                id=rec_id,
                instruction=str(rec.get("instruction", "") or ""),
                input=str(rec.get("input", "") or ""),
                output=output,
                turns=turns,
                source=str(rec.get("source") or default_source),
            )
        )
        pos += 1
    return samples


def _validate_ids(samples: list[InstructionSample]) -> None:
    seen: set[int] = set()
    for s in samples:
        if s.id in seen:
            raise CorpusError(f"duplicate sample id {s.id}")
        seen.add(s.id)
    if seen and sorted(seen) != list(range(len(samples))):
        raise CorpusError("sample ids must form a contiguous range starting at 0")


def load_dataset(path: str, default_source: str = "general") -> Dataset:
    with open(path, encoding="utf-8") as fh:
        samples = load_records(fh.read().splitlines(), default_source=default_source)
    _validate_ids(samples)
    return Dataset(samples)


def load_many(paths: Sequence[str], sources: Sequence[str] | None = None) -> Dataset:
    """Load and concatenate several JSONL files, assigning ids in global file order.

    `sources` is either empty (per-record/default), a single label for all
    files, or one label per file.
    """
    if sources and len(sources) not in (1, len(paths)):
        raise CorpusError(f"got {len(sources)} --source labels for {len(paths)} datasets")
    samples: list[InstructionSample] = []
    for k, path in enumerate(paths):
        if not sources:
            src = "general"
        elif len(sources) == 1:
            src = sources[0]
        else:
            src = sources[k]
        with open(path, encoding="utf-8") as fh:
            samples.extend(load_records(fh.read().splitlines(), default_source=src, id_offset=len(samples)))
    _validate_ids(samples)
    return Dataset(samples)
