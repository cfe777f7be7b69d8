"""UBL invoice parsing and the document-extraction environment.

Universal Business Language invoices are namespaced XML. The parser pulls the
fields an extraction agent cares about (ids, free-text notes, payment terms,
party names, line-item descriptions, monetary totals) in document order and
exposes a flattened text view for searching. Documents that are well-formed
XML but not UBL invoices still parse generically, with a warning flag set.
"""
from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

from .core import Task, TaskSet
from .runtime import Environment, EnvironmentFault


class UblParseError(Exception):
    """Malformed XML; carries the 1-based line and column of the defect."""

    def __init__(self, message: str, line: int, column: int) -> None:
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


@dataclass
class UblInvoice:
    """Structured extract of one invoice document."""

    ids: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    payment_terms: list[str] = field(default_factory=list)
    party_names: list[str] = field(default_factory=list)
    item_descriptions: list[str] = field(default_factory=list)
    totals: list[tuple[str, str]] = field(default_factory=list)
    flattened_text: str = ""
    is_ubl: bool = True


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


_TOTAL_FIELDS = {
    "LineExtensionAmount", "TaxExclusiveAmount", "TaxInclusiveAmount",
    "AllowanceTotalAmount", "PrepaidAmount", "PayableRoundingAmount",
    "PayableAmount",
}


def parse_ubl_invoice(document: bytes | str) -> UblInvoice:
    """Parse one UBL invoice (or, with a warning flag, any XML document)."""
    if isinstance(document, str):
        document = document.encode("utf-8")
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        line, column = exc.position if exc.position else (0, 0)
        raise UblParseError(str(exc.msg if hasattr(exc, "msg") else exc),
                            line, column) from exc

    invoice = UblInvoice()
    invoice.is_ubl = _local(root.tag) == "Invoice"

    spans: list[str] = []
    # Stack-based walk keeps document order and lets us know each element's
    # ancestor chain (PaymentTerms notes vs. top-level notes, item descriptions).
    stack: list[tuple[ET.Element, tuple[str, ...]]] = [(root, ())]
    ordered: list[tuple[ET.Element, tuple[str, ...]]] = []
    while stack:
        elem, ancestors = stack.pop()
        ordered.append((elem, ancestors))
        child_path = ancestors + (_local(elem.tag),)
        stack.extend(reversed([(c, child_path) for c in list(elem)]))

    for elem, ancestors in ordered:
        name = _local(elem.tag)
        text = (elem.text or "").strip()
        if not text:
            continue
        spans.append(elem.text if elem.text is not None else text)
        if name == "ID":
            invoice.ids.append(text)
        elif name == "Note":
            if "PaymentTerms" in ancestors:
                invoice.payment_terms.append(text)
            else:
                invoice.notes.append(text)
        elif name == "PaymentTerms":
            invoice.payment_terms.append(text)
        elif name == "Name" and "PartyName" in ancestors:
            invoice.party_names.append(text)
        elif name == "Description" and "Item" in ancestors:
            invoice.item_descriptions.append(text)
        elif name in _TOTAL_FIELDS and "LegalMonetaryTotal" in ancestors:
            invoice.totals.append((name, text))

    invoice.flattened_text = "\n".join(spans)
    return invoice


# ---------------------------------------------------------------------------
# Extraction environment
# ---------------------------------------------------------------------------

DEFAULT_EXTRACTION_INSTRUCTION = """# Task background
Read the content of a xml file which contains a shipment invoice document in UBL format. You are tasked to understand the content and extract the transport reference number from it.
When you reach a conclusion, format your answer as "final answer: [extracted reference number]\""""


class UblEnvironment(Environment):
    """One-shot document environment: the first observation is the document
    text, and the episode ends after the agent's reply."""

    def __init__(self, docs_dir: str | Path | None = None) -> None:
        self.docs_dir = Path(docs_dir) if docs_dir else None
        self._task: Task | None = None
        self._done = False

    def reset(self, task: Task) -> str:
        if not task.payload_path:
            raise EnvironmentFault(f"task {task.id} has no document path")
        path = Path(task.payload_path)
        if self.docs_dir is not None and not path.is_absolute():
            path = self.docs_dir / path
        if not path.exists():
            raise EnvironmentFault(f"document not found: {path}")
        self._task = task
        self._done = False
        return path.read_text(encoding="utf-8")

    def step(self, action: str) -> tuple[str, bool]:
        if self._task is None:
            raise EnvironmentFault("step before reset")
        if self._done:
            raise EnvironmentFault("step after terminal state")
        self._done = True
        return ("document closed; provide your final answer if you have not", True)


def load_ubl_tasks(docs_dir: str | Path, labels_path: str | Path,
                   name: str = "ubl") -> TaskSet:
    """Build a task set from a directory of .xml documents plus a labels file.

    The labels file holds one JSON object per line: {"task_id": ..., "label": ...}.
    Each task id must match a document named <task_id>.xml in `docs_dir`.
    """
    docs_dir = Path(docs_dir)
    tasks = []
    with open(labels_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{labels_path}:{line_no}: bad JSON: {exc}") from exc
            task_id = entry["task_id"]
            doc = docs_dir / f"{task_id}.xml"
            if not doc.exists():
                raise FileNotFoundError(f"{labels_path}:{line_no}: missing document {doc}")
            tasks.append(Task(
                id=task_id,
                query="Extract the transport reference number from the attached "
                      "shipment invoice document.",
                label=entry["label"],
                category=entry.get("category"),
                payload_path=str(doc),
            ))
    return TaskSet(name=name, tasks=tuple(tasks))
