"""Two-step rewriting of caption pairs into (query, chosen, rejected) records.

Step 1 asks for a question that targets the differing detail. Step 2 revises
the question and rephrases both captions. Two rewriters are provided: a
deterministic slot-filling ``TemplateRewriter`` and an ``ExternalRewriter``
that talks to an OpenAI-compatible chat endpoint through a disk cache.
"""
from __future__ import annotations

import difflib
import hashlib
import json
import logging
import os
import re
import threading
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

log = logging.getLogger(__name__)

TEMPERATURE = 0.7

STEP1_SYSTEM = (
    "You are a helpful assistant that generates a natural-sounding instruction prompt for a "
    "vision-language scenario. Given two responses about an image: one 'chosen' and one 'rejected', "
    "your task is to produce a single instruction or question that encourages the user to naturally "
    "reveal the critical differences between the two responses. Focus on attributes that differ "
    "(like number, color, position, orientation). The prompt should sound like a normal request someone "
    "might ask when wanting more detail about the image. It should not sound overly forced or contrived, "
    "and it should not explicitly mention that there are two responses or that differences are being "
    "tested. Also, try to vary your phrasing, and do not always start the instruction with 'Could' or 'Can'."
)
STEP1_USER = (
    "Chosen response: {ORIGINAL_RESPONSE}\n"
    "Rejected response: {CONTRAST_RESPONSE}\n"
    "\n"
    "Generate a single, natural-sounding instruction or question that would prompt a user or model to "
    "include the detail of the collar in a natural way. Avoid making the prompt sound forced or "
    "unnatural, and do not explicitly mention comparing two descriptions."
)
STEP2_SYSTEM = (
    "You are a helpful assistant that revises instruction prompts and their corresponding responses for "
    "vision-language scenarios. Given an initial instruction and two responses about an image: one "
    "'chosen' and one 'rejected', your task is to:\n"
    "1. Revise the instruction to make it sound more natural and conversational and ensure it seamlessly "
    "leads to the given responses. Also, try to vary your phrasing, and do not always start the "
    "instruction with 'Could' or 'Can'.\n"
    "2. Rephrase both the chosen and rejected responses to diversify the language without adding or "
    "removing any details.\n"
    "3. Ensure that the differences between the chosen and rejected responses remain highlighted and are "
    "consistent with the original responses.\n"
    "\n"
    "Do not introduce any new information or omit existing details. The revisions should maintain "
    "accuracy and ensure coherence between the instruction and responses."
)
STEP2_USER = (
    "Initial Instruction: {STEP1_GENERATED}\n"
    "Chosen Response: {ORIGINAL_RESPONSE}\n"
    "Rejected Response: {CONTRAST_RESPONSE}\n"
    "\n"
    "Revise the instruction and both responses as described above.\n"
    "\n"
    "Here are some examples:\n"
    "\n"
    "1.\n"
    "Initial Instruction: \"What can you tell me about the hair color of the woman who is sweeping the floor?\"\n"
    "Chosen Response: \"A blonde-haired woman wearing a white skirt, white shirt, white apron, and black shoes "
    "is sweeping the floor.\"\n"
    "Rejected Response: \"A black-haired woman wearing a white skirt, white shirt, white apron, and black shoes "
    "is sweeping the floor.\"\n"
    "Revised Instruction: \"Describe the woman's hair color and her attire while she's sweeping the floor?\"\n"
    "Revised Chosen Response: \"The woman sweeping the floor has blonde hair and is wearing a white skirt, "
    "white shirt, white apron, and black shoes.\"\n"
    "Revised Rejected Response: \"The woman sweeping the floor has black hair and is wearing a white skirt, "
    "white shirt, white apron, and black shoes.\"\n"
    "\n"
    "2.\n"
    "Initial Instruction: \"Where is the air stunt relative to the snowy mound in the image?\"\n"
    "Chosen Response: \"An air stunt is above a snowy mound.\"\n"
    "Rejected Response: \"An air stunt is below a snowy mound.\"\n"
    "Revised Instruction: \"What do you notice about the position of the air stunt in relation to the "
    "snowy mound in the image?\"\n"
    "Revised Chosen Response: \"The air stunt is positioned above the snowy mound.\"\n"
    "Revised Rejected Response: \"The air stunt is located below the snowy mound.\"\n"
    "\n"
    "Now, revise the following instruction and responses:\n"
    "Initial Instruction: {STEP1_GENERATED}\n"
    "Chosen Response: {ORIGINAL_RESPONSE}\n"
    "Rejected Response: {CONTRAST_RESPONSE}\n"
    "\n"
    "Reply ONLY in the following format and no other text or notes:\n"
    "\n"
    "Revised Instruction: \n"
    "Revised Chosen Response: \n"
    "Revised Rejected Response: "
)
REPLY_PREFIXES = ("Revised Instruction:", "Revised Chosen Response:", "Revised Rejected Response:")

AUGMENTED_FORMAT = "vcontrast.augmented"
CAPTIONS_FORMAT = "vcontrast.captions"


class MalformedReply(ValueError):
    pass


class RewriterError(RuntimeError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


def fill(template: str, **values: str) -> str:
    # plain substitution; captions may contain braces
    for key, value in values.items():
        template = template.replace("{" + key + "}", value)
    return template


def template_hash(*templates: str) -> str:
    return hashlib.sha256("\x00".join(templates).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- text diffing

_WORD = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def _diff_spans(a: list[str], b: list[str]):
    sm = difflib.SequenceMatcher(a=a, b=b, autojunk=False)
    return [op for op in sm.get_opcodes() if op[0] != "equal"]


def contrast_tokens(caption_w: str, caption_l: str) -> tuple[list[str], list[str]]:
    """Word tokens present only in the chosen and only in the rejected caption."""
    a, b = words(caption_w), words(caption_l)
    only_w, only_l = [], []
    for _, i1, i2, j1, j2 in _diff_spans(a, b):
        only_w += a[i1:i2]
        only_l += b[j1:j2]
    return only_w, only_l


def contrast_preserved(caption_w: str, caption_l: str, response_w: str, response_l: str) -> bool:
    """Each side's differing tokens survive in its own response and not in the other."""
    only_w, only_l = contrast_tokens(caption_w, caption_l)
    if not only_w and not only_l:
        return False
    rw, rl = set(words(response_w)), set(words(response_l))
    if not set(only_w) <= rw or not set(only_l) <= rl:
        return False
    # a token unique to one caption turning up on the wrong side means inversion
    exclusive_w = set(only_w) - set(words(caption_l))
    exclusive_l = set(only_l) - set(words(caption_w))
    return not (exclusive_w & rl) and not (exclusive_l & rw)


def parse_revision(reply: str) -> tuple[str, str, str]:
    """Parse the strict three-line reply; raises MalformedReply otherwise."""
    lines = [ln.strip() for ln in reply.strip().splitlines() if ln.strip()]
    if len(lines) != 3:
        raise MalformedReply(f"expected 3 non-empty lines, got {len(lines)}")
    out = []
    for line, prefix in zip(lines, REPLY_PREFIXES):
        if not line.startswith(prefix):
            raise MalformedReply(f"expected line starting {prefix!r}, got {line[:40]!r}")
        value = _unquote(line[len(prefix):])
        if not value:
            raise MalformedReply(f"empty value after {prefix!r}")
        out.append(value)
    return out[0], out[1], out[2]


def _unquote(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1].strip()
    return text


def _sentence(text: str) -> str:
    text = text.strip()
    if not text:
        return text
    text = text[0].upper() + text[1:]
    return text if text[-1] in ".!?" else text + "."


# ---------------------------------------------------------------- rewriters

class Rewriter(Protocol):
    provenance: str

    def generate_query(self, caption_w: str, caption_l: str, attempt: int = 0) -> str: ...

    def revise(self, query: str, caption_w: str, caption_l: str, attempt: int = 0) -> str: ...


COLORS = frozenset("black white red green blue yellow orange purple pink brown gray grey blonde golden "
                   "silver dark light".split())
NUMBERS = frozenset("no zero one two three four five six seven eight nine ten single pair several many "
                    "few".split()) | frozenset(str(k) for k in range(100))
POSITIONS = frozenset("left right above below top bottom front behind under over beside near inside "
                      "outside".split())
SIZES = frozenset("small large big tiny huge tall short little long".split())
BODY_SUFFIXES = {"haired": "hair", "eyed": "eye", "skinned": "skin"}
STOPWORDS = frozenset("a an the is are of to in on at".split())


def _noun_after(tokens: list[str], start: int) -> str | None:
    modifiers = COLORS | NUMBERS | SIZES | set(BODY_SUFFIXES) | STOPWORDS
    for tok in tokens[start:]:
        if tok not in modifiers:
            return tok
    return None


def _phrase(tokens: list[str]) -> str:
    while tokens and tokens[0] in STOPWORDS:
        tokens = tokens[1:]
    while tokens and tokens[-1] in STOPWORDS:
        tokens = tokens[:-1]
    return " ".join(tokens)


def template_question(caption_w: str, caption_l: str) -> str:
    """Deterministic question aimed at the first differing span."""
    a, b = words(caption_w), words(caption_l)
    spans = _diff_spans(a, b)
    if not spans:
        raise ValueError("captions do not differ")
    _, i1, i2, j1, j2 = spans[0]
    diff = set(a[i1:i2]) | set(b[j1:j2])
    after = a[i2:]

    if diff <= COLORS and after and after[0] in BODY_SUFFIXES:
        part = BODY_SUFFIXES[after[0]]
        subject = _noun_after(a, i2 + 1) or "person"
        return f"What can you tell me about the {part} color of the {subject}?"
    if diff <= POSITIONS:
        subject = _phrase([t for t in a[:i1] if t not in ("is", "are")]) or "object"
        ref = _phrase(after) or "rest of the scene"
        return f"Where is the {subject} relative to the {ref} in the image?"
    if diff <= NUMBERS:
        subject = _noun_after(a, i2) or "objects"
        return f"How many {subject} items are in the image?"
    if diff <= COLORS:
        subject = _noun_after(a, i2) or "object"
        return f"What color is the {subject} in the image?"
    if diff <= SIZES:
        subject = _noun_after(a, i2) or "object"
        return f"How big is the {subject} in the image?"
    if after and after[0] in ("is", "are"):
        return f"What object {' '.join(after)} in the image?"
    subject = _noun_after(a, i2)
    if subject is not None and subject not in diff:
        return f"What does the {subject} look like in the image?"
    return "What is shown in the image?"


class TemplateRewriter:
    """Offline rewriter: slot-filled question, captions kept verbatim."""

    provenance = "template"

    def generate_query(self, caption_w: str, caption_l: str, attempt: int = 0) -> str:
        return template_question(caption_w, caption_l)

    def revise(self, query: str, caption_w: str, caption_l: str, attempt: int = 0) -> str:
        values = (query, _sentence(caption_w), _sentence(caption_l))
        return "\n".join(f"{p} {v}" for p, v in zip(REPLY_PREFIXES, values))


Transport = Callable[[dict], str]


def http_transport(payload: dict, timeout: float = 60.0) -> str:
    """POST an OpenAI-style chat completion; config comes from the environment.

    VCONTRAST_LLM_ENDPOINT  full URL of the chat-completions endpoint
    VCONTRAST_LLM_API_KEY   bearer token (optional)
    """
    endpoint = os.environ.get("VCONTRAST_LLM_ENDPOINT")
    if not endpoint:
        raise RuntimeError("VCONTRAST_LLM_ENDPOINT is not set")
    headers = {"Content-Type": "application/json"}
    key = os.environ.get("VCONTRAST_LLM_API_KEY")
    if key:
        headers["Authorization"] = f"Bearer {key}"
    req = urllib.request.Request(endpoint, data=json.dumps(payload).encode("utf-8"), headers=headers)
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        body = json.loads(resp.read().decode("utf-8"))
    return body["choices"][0]["message"]["content"]


class ExternalRewriter:
    """Chat-model rewriter with a content-addressed disk cache.

    Cache entries are keyed by the template hash, the filled inputs, the
    temperature and the attempt number, so reruns replay identical replies.
    Every request and reply is appended to ``requests.jsonl`` in the cache.
    """

    provenance = "external-llm"

    def __init__(self, cache_dir: str | Path, transport: Transport | None = None, model: str | None = None,
                 temperature: float = TEMPERATURE, max_attempts: int = 3):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.transport = transport or http_transport
        self.model = model or os.environ.get("VCONTRAST_LLM_MODEL", "gpt-4o")
        self.temperature = temperature
        self.max_attempts = max_attempts
        self._lock = threading.Lock()

    def _complete(self, step: str, system: str, user_template: str, inputs: dict, attempt: int) -> str:
        key_src = json.dumps({"template": template_hash(system, user_template), "inputs": inputs,
                              "temperature": self.temperature, "attempt": attempt}, sort_keys=True)
        key = hashlib.sha256(key_src.encode("utf-8")).hexdigest()
        path = self.cache_dir / f"{key}.json"
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))["reply"]
        payload = {"model": self.model, "temperature": self.temperature,
                   "messages": [{"role": "system", "content": system},
                                {"role": "user", "content": fill(user_template, **inputs)}]}
        last_exc = None
        for k in range(1, self.max_attempts + 1):
            try:
                reply = self.transport(payload)
                break
            except Exception as exc:  # transport errors are retried uniformly
                last_exc = exc
                log.warning("%s request failed (try %d): %s", step, k, exc)
        else:
            raise RewriterError(f"{step} request failed: {last_exc}", self.max_attempts)
        with self._lock:
            path.write_text(json.dumps({"step": step, "reply": reply}, sort_keys=True) + "\n", encoding="utf-8")
            with open(self.cache_dir / "requests.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"key": key, "step": step, "request": payload, "reply": reply},
                                    sort_keys=True) + "\n")
        return reply

    def generate_query(self, caption_w: str, caption_l: str, attempt: int = 0) -> str:
        inputs = {"ORIGINAL_RESPONSE": caption_w, "CONTRAST_RESPONSE": caption_l}
        return _unquote(self._complete("step1", STEP1_SYSTEM, STEP1_USER, inputs, attempt))

    def revise(self, query: str, caption_w: str, caption_l: str, attempt: int = 0) -> str:
        inputs = {"STEP1_GENERATED": query, "ORIGINAL_RESPONSE": caption_w, "CONTRAST_RESPONSE": caption_l}
        return self._complete("step2", STEP2_SYSTEM, STEP2_USER, inputs, attempt)


# ---------------------------------------------------------------- steps

@dataclass(frozen=True)
class AugmentedRecord:
    pair_id: str
    query: str
    response_w: str
    response_l: str
    provenance: str
    caption_w: str
    caption_l: str

    def to_record(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StepTwoOutcome:
    malformed_replies: int = 0
    fallback: str | None = None  # None, "malformed" or "contrast"


def _check_captions(caption_w: str, caption_l: str) -> None:
    if not caption_w.strip() or not caption_l.strip():
        raise ValueError("captions must be non-empty")
    if words(caption_w) == words(caption_l):
        raise ValueError("captions must differ")


def augment_step1(caption_w: str, caption_l: str, rewriter: Rewriter) -> str:
    _check_captions(caption_w, caption_l)
    query = _unquote(rewriter.generate_query(caption_w, caption_l))
    if not query:
        raise RewriterError("empty question", 1)
    return query


def augment_step2(query: str, caption_w: str, caption_l: str, rewriter: Rewriter, pair_id: str = "",
                  attempts: int = 3) -> tuple[AugmentedRecord, StepTwoOutcome]:
    """Revise query and captions; falls back to raw captions if the contrast is lost."""
    _check_captions(caption_w, caption_l)
    malformed, fallback = 0, "malformed"
    for attempt in range(attempts):
        try:
            q, rw, rl = parse_revision(rewriter.revise(query, caption_w, caption_l, attempt))
        except MalformedReply as exc:
            malformed += 1
            log.info("%s: malformed reply on attempt %d: %s", pair_id, attempt, exc)
            continue
        if contrast_preserved(caption_w, caption_l, rw, rl):
            return (AugmentedRecord(pair_id, q, rw, rl, rewriter.provenance, caption_w, caption_l),
                    StepTwoOutcome(malformed, None))
        fallback = "contrast"
    record = AugmentedRecord(pair_id, query, caption_w.strip(), caption_l.strip(), "template",
                             caption_w, caption_l)
    return record, StepTwoOutcome(malformed, fallback)


@dataclass
class AugmentReport:
    total: int = 0
    provenance: dict[str, int] = field(default_factory=dict)
    malformed_replies: int = 0
    fallback_malformed: int = 0
    fallback_contrast: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def read_captions(path: str | Path) -> list[dict]:
    """Caption JSONL: optional header line, then {pair_id, caption_w, caption_l} rows."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        if "format" in obj:
            if obj["format"] != CAPTIONS_FORMAT:
                raise ValueError(f"{path}:{lineno}: unexpected format {obj['format']!r}")
            continue
        missing = {"pair_id", "caption_w", "caption_l"} - set(obj)
        if missing:
            raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
        rows.append(obj)
    return rows


def write_captions(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": CAPTIONS_FORMAT, "version": 1}) + "\n")
        for row in rows:
            fh.write(json.dumps({k: row[k] for k in ("pair_id", "caption_w", "caption_l")},
                                sort_keys=True) + "\n")


def augment_records(rows: Sequence[dict], rewriter: Rewriter, in_flight: int = 4,
                    keep_ids: set[str] | None = None) -> tuple[list[AugmentedRecord], AugmentReport]:
    if keep_ids is not None:
        rows = [r for r in rows if r["pair_id"] in keep_ids]
    rows = sorted(rows, key=lambda r: r["pair_id"])

    def one(row):
        query = augment_step1(row["caption_w"], row["caption_l"], rewriter)
        return augment_step2(query, row["caption_w"], row["caption_l"], rewriter, pair_id=row["pair_id"])

    with ThreadPoolExecutor(max_workers=max(1, in_flight)) as pool:
        results = list(pool.map(one, rows))

    report = AugmentReport(total=len(results))
    records = []
    for rec, outcome in results:
        records.append(rec)
        report.provenance[rec.provenance] = report.provenance.get(rec.provenance, 0) + 1
        report.malformed_replies += outcome.malformed_replies
        if outcome.fallback == "malformed":
            report.fallback_malformed += 1
        elif outcome.fallback == "contrast":
            report.fallback_contrast += 1
    return records, report


def run_augment(in_path: str | Path, rewriter: Rewriter, out_path: str | Path,
                kept_path: str | Path | None = None, in_flight: int = 4) -> AugmentReport:
    """Augment a caption file, optionally restricted to a filter's kept set."""
    from .filtering import read_kept_ids

    keep = set(read_kept_ids(kept_path)) if kept_path is not None else None
    records, report = augment_records(read_captions(in_path), rewriter, in_flight, keep)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": AUGMENTED_FORMAT, "version": 1}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_record(), sort_keys=True) + "\n")
    return report
