"""Wikitext to plain text, and plain text to paragraphs.

The stripper is deliberately lossy: templates, tables, references and media
are dropped rather than rendered. Every rewrite shortens the text, and passes
repeat until nothing changes, so the result is a fixed point.
"""

from __future__ import annotations

import html
import re

MIN_PARAGRAPH_CHARS = 40

_COMMENT = re.compile(r"<!--.*?(?:-->|\Z)", re.S)
_BLOCK_TAGS = "ref|gallery|math|timeline|imagemap|score|templatedata|syntaxhighlight|graph|mapframe|chem"
_SELF_CLOSING = re.compile(rf"<\s*(?:{_BLOCK_TAGS}|references)\b[^<>]*/\s*>", re.I)
_BLOCK = re.compile(rf"<\s*({_BLOCK_TAGS})\b[^<>]*>.*?<\s*/\s*\1\s*>", re.I | re.S)
_TAG = re.compile(r"</?\s*[A-Za-z][A-Za-z0-9]*\b[^<>]*>")
_EXT_LINK = re.compile(r"\[(?:https?:)?//[^\s\[\]]+(?:\s+([^\[\]]*))?\]")
_QUOTES = re.compile(r"'{2,}")
_HEADING = re.compile(r"^[ \t]*(={1,6})[ \t]*(.*?)[ \t]*\1[ \t]*$", re.M)
_LIST = re.compile(r"^[ \t]*[*#:;]+[ \t]*", re.M)
_HR = re.compile(r"^-{4,}[ \t]*$", re.M)
_MAGIC = re.compile(r"__[A-Z]+__")
_ENTITY = re.compile(r"&(?:[A-Za-z][A-Za-z0-9]{1,31}|#[0-9]{1,7}|#[xX][0-9A-Fa-f]{1,6});")
_HSPACE = re.compile(r"[ \t   ]+")
_BLANKS = re.compile(r"\n{3,}")
_PARA_SPLIT = re.compile(r"\n[ \t\r\f\v]*\n")

_DROP_NAMESPACES = {"file", "image", "category", "media", "datei", "bild", "kategorie", "文件", "分类", "图像"}
_INTERWIKI = re.compile(r"^[a-z]{2,3}(?:-[a-z]+)?$")


def _at_line_start(text: str, i: int) -> bool:
    j = i - 1
    while j >= 0 and text[j] in " \t":
        j -= 1
    return j < 0 or text[j] == "\n"


def _drop_braces(text: str) -> tuple[str, bool]:
    """Remove (nested) templates, parameters and tables."""
    out = []
    stack: list[str] = []
    i, n = 0, len(text)
    while i < n:
        if text.startswith("{{{", i):
            stack.append("}}}")
            i += 3
        elif text.startswith("{{", i):
            stack.append("}}")
            i += 2
        elif text.startswith("{|", i) and _at_line_start(text, i):
            stack.append("|}")
            i += 2
        elif stack and text.startswith(stack[-1], i):
            i += len(stack.pop())
        elif not stack and text.startswith("}}", i):
            i += 2
        else:
            if not stack:
                out.append(text[i])
            i += 1
    return "".join(out), bool(stack)


def _match_link(text: str, i: int) -> int | None:
    """Index just past the ``]]`` closing the ``[[`` at ``i``."""
    depth = 0
    j, n = i, len(text)
    while j < n:
        if text.startswith("[[", j):
            depth += 1
            j += 2
        elif text.startswith("]]", j):
            depth -= 1
            j += 2
            if depth == 0:
                return j
        else:
            j += 1
    return None


def _link_text(inner: str) -> str:
    target, pipe, label = inner.partition("|")
    target = target.strip().lstrip(":")
    if ":" in target:
        ns = target.split(":", 1)[0].strip().lower()
        if ns in _DROP_NAMESPACES and not inner.strip().startswith(":"):
            return ""
        if ns in _DROP_NAMESPACES:
            target = target.split(":", 1)[1]
        elif not pipe and _INTERWIKI.match(ns):
            return ""
    if pipe and label.strip():
        return _rewrite_links(label)[0]
    page, _, section = target.partition("#")
    return page.strip() or section.strip()


def _rewrite_links(text: str) -> tuple[str, bool]:
    out = []
    flagged = False
    i, n = 0, len(text)
    while i < n:
        if text.startswith("[[", i):
            j = _match_link(text, i)
            if j is None:
                flagged = True
                i += 2
                continue
            out.append(_link_text(text[i + 2:j - 2]))
            i = j
        elif text.startswith("]]", i):
            i += 2
        else:
            out.append(text[i])
            i += 1
    return "".join(out), flagged


def _normalize_space(text: str) -> str:
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    text = _HSPACE.sub(" ", text)
    text = "\n".join(line.strip() for line in text.split("\n"))
    return _BLANKS.sub("\n\n", text).strip()


def _strip_once(text: str) -> tuple[str, bool]:
    flagged = "<!--" in text and "-->" not in text[text.find("<!--"):]
    text = _COMMENT.sub("", text)
    text = _SELF_CLOSING.sub("", text)
    text = _BLOCK.sub("", text)
    text, unbalanced = _drop_braces(text)
    text, dangling = _rewrite_links(text)
    text = _EXT_LINK.sub(lambda m: m.group(1) or "", text)
    text = _TAG.sub("", text)
    text = _QUOTES.sub("", text)
    text = _HEADING.sub(lambda m: m.group(2), text)
    text = _HR.sub("", text)
    text = _LIST.sub("", text)
    text = _MAGIC.sub("", text)
    text = _ENTITY.sub(lambda m: html.unescape(m.group(0)), text)
    return _normalize_space(text), flagged or unbalanced or dangling


def strip_wikitext_flagged(wikitext: str) -> tuple[str, bool]:
    """Plain text plus a flag set when unbalanced markup was cut best-effort."""
    text, flagged = wikitext, False
    for _ in range(20):
        new, f = _strip_once(text)
        flagged = flagged or f
        if new == text:
            break
        text = new
    return text, flagged


def strip_wikitext(wikitext: str) -> str:
    return strip_wikitext_flagged(wikitext)[0]


def segment_paragraphs(text: str, min_chars: int = MIN_PARAGRAPH_CHARS) -> list[str]:
    """Split on blank lines; fragments under ``min_chars`` merge into the next
    paragraph, or into the previous one at the end of the text."""
    parts = [p.strip() for p in _PARA_SPLIT.split(text.replace("\r\n", "\n"))]
    parts = [p for p in parts if p]
    out: list[str] = []
    pending = ""
    for k, p in enumerate(parts):
        if pending:
            p = pending + "\n" + p
            pending = ""
        if len(p) < min_chars and k < len(parts) - 1:
            pending = p
        elif len(p) < min_chars and out:
            out[-1] = out[-1] + "\n" + p
        else:
            out.append(p)
    return out
