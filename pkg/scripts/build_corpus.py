#!/usr/bin/env python3
"""Assemble an English text corpus from docstrings of installed packages.

Walks the source trees of a few large, locally installed Python packages,
extracts module/class/function docstrings via ast (no imports, no side
effects), deduplicates, shuffles paragraphs with a fixed seed, and writes
a single UTF-8 text file. Gives a few MB of varied English prose without
any network access.

Usage:
    python scripts/build_corpus.py --out corpus.txt --megabytes 6
"""

import argparse
import ast
import glob
import random
import sys
import sysconfig


DEFAULT_PACKAGES = [
    "sklearn", "scipy", "numpy", "pandas", "matplotlib",
    "statsmodels", "sympy", "torch", "networkx",
]


_SECTION_HEADERS = (
    "Parameters",
    "Returns",
    "Yields",
    "Raises",
    "Attributes",
    "Examples",
    "See Also",
    "Notes",
    "References",
)


def prose_only(doc: str) -> str:
    """Keep the running-text parts of a docstring.

    Cuts at the first numpy-doc section header and drops indented code or
    directive lines, leaving something close to ordinary English prose.
    """
    lines = []
    prev = ""
    for line in doc.split("\n"):
        stripped = line.strip()
        if stripped in _SECTION_HEADERS and not lines:
            break
        if stripped in _SECTION_HEADERS or set(stripped) == {"-"} and prev in _SECTION_HEADERS:
            break
        if line.startswith(("    ", "\t", ">>>", "..")):
            prev = stripped
            continue
        if set(stripped) in ({"-"}, {"="}, {"~"}) and stripped:
            if lines:
                lines.pop()  # the underlined title above it
            prev = stripped
            continue
        lines.append(line)
        prev = stripped
    return "\n".join(lines).strip()


def docstrings_from_file(path, min_len=200):
    try:
        with open(path, encoding="utf-8", errors="ignore") as f:
            tree = ast.parse(f.read())
    except (SyntaxError, ValueError, OSError):
        return
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            doc = ast.get_docstring(node)
            if doc:
                doc = prose_only(doc)
                if len(doc) >= min_len:
                    yield doc


def prose_quality(text: str) -> bool:
    """Accept paragraphs that read like sentences, not tables or lists."""
    if len(text) < 150:
        return False
    n_alpha_space = sum(c.isalpha() or c in " \n.," for c in text)
    if n_alpha_space / len(text) < 0.9:
        return False
    words = text.split()
    return bool(words) and sum(len(w) for w in words) / len(words) <= 8.5


def doc_paragraphs(doc_globs):
    """Unique prose paragraphs from system documentation files."""
    for pattern in doc_globs:
        for path in sorted(glob.glob(pattern)):
            try:
                text = open(path, encoding="utf-8", errors="ignore").read()
            except OSError:
                continue
            for para in text.split("\n\n"):
                para = " ".join(para.split())
                if prose_quality(para):
                    yield para


def harvest(packages, min_len=200):
    roots = [sysconfig.get_paths()["purelib"]]
    texts = []
    seen = set()

    def keep(t):
        key = hash(t)
        if key not in seen:
            seen.add(key)
            texts.append(t)

    for pkg in packages:
        files = []
        for root in roots:
            files.extend(sorted(glob.glob(f"{root}/{pkg}/**/*.py", recursive=True)))
        for path in files:
            if "test" in path:
                continue
            for doc in docstrings_from_file(path, min_len):
                for para in doc.split("\n\n"):
                    para = " ".join(para.split())
                    if prose_quality(para):
                        keep(para)
    for para in doc_paragraphs(
        ["/usr/share/doc/*/copyright", "/usr/share/common-licenses/*"]
    ):
        keep(para)
    return texts


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--megabytes", type=float, default=6.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--packages", nargs="*", default=DEFAULT_PACKAGES)
    args = ap.parse_args()

    texts = harvest(args.packages)
    if not texts:
        print("no docstrings found; is the package list installed?", file=sys.stderr)
        return 1
    random.Random(args.seed).shuffle(texts)
    target = int(args.megabytes * 1e6)
    out = []
    size = 0
    for t in texts:
        out.append(t)
        size += len(t.encode("utf-8")) + 2
        if size >= target:
            break
    blob = "\n\n".join(out)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(blob)
    print(f"wrote {len(blob.encode('utf-8')) / 1e6:.2f} MB from {len(out)} docstrings")
    return 0


if __name__ == "__main__":
    sys.exit(main())
