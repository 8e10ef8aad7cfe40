"""Per-user content-addressed store for deployed computation modules.

On-disk layout is ``<root>/<user_id>/<name>.mod``, one file per module,
holding the canonicalized UTF-8 bytes of the code. Replacement writes a
temp file and renames it over the old one, so a concurrent reload sees
either the old or the new module in full, never a torn file.
"""

from __future__ import annotations

import logging
import os
import tempfile
import threading
from pathlib import Path

from . import expression
from .errors import IntegrityError, NotFoundError, StorageError, ValidationError
from .protocol import CodeModule, canonicalize, compute_signature, now_ms

log = logging.getLogger(__name__)

MODULE_SUFFIX = ".mod"


class ModuleStore:
    """Maps (user_id, name) to the current module version.

    Supports concurrent readers with a single writer per entry; ``load``
    always re-reads the file so callers observe replacements made since
    the previous iteration.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str], CodeModule] = {}
        self._rescan()

    def _rescan(self) -> None:
        for user_dir in sorted(self.root.iterdir()):
            if not user_dir.is_dir():
                continue
            for path in sorted(user_dir.glob(f"*{MODULE_SUFFIX}")):
                try:
                    code = path.read_text(encoding="utf-8")
                except (OSError, UnicodeDecodeError) as exc:
                    log.warning("skipping unreadable module file %s: %s", path, exc)
                    continue
                module = CodeModule(
                    user_id=user_dir.name,
                    name=path.name[: -len(MODULE_SUFFIX)],
                    code=code,
                    signature=compute_signature(code),
                    deployed_at=int(path.stat().st_mtime * 1000),
                )
                self._entries[(module.user_id, module.name)] = module

    def _path(self, user_id: str, name: str) -> Path:
        return self.root / user_id / f"{name}{MODULE_SUFFIX}"

    def store(self, module: CodeModule) -> CodeModule:
        """Persist a module atomically, replacing any previous version.

        Verifies the signature by recomputation and re-runs code validation
        before touching the filesystem (deployment already validated, but a
        store is the last line of defense).
        """
        module.validate()
        recomputed = compute_signature(module.code)
        if recomputed != module.signature:
            raise IntegrityError(
                f"signature mismatch for {module.user_id}/{module.name}: "
                f"claimed {module.signature}, canonical code hashes to {recomputed}"
            )
        diagnostics = expression.validate_code(module.code)
        if diagnostics:
            raise ValidationError(
                f"module {module.name} failed validation: {diagnostics[0]}", "code"
            )

        # Store the canonical form so a later load hashes identically.
        canonical = canonicalize(module.code)
        stored = CodeModule(
            user_id=module.user_id,
            name=module.name,
            code=canonical.decode("utf-8"),
            signature=module.signature,
            deployed_at=now_ms(),
        )
        path = self._path(module.user_id, module.name)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp_name = tempfile.mkstemp(
                prefix=f".{module.name}.", suffix=".tmp", dir=path.parent
            )
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(canonical)
                with self._lock:
                    os.replace(tmp_name, path)
                    self._entries[(module.user_id, module.name)] = stored
            except BaseException:
                try:
                    os.unlink(tmp_name)
                except OSError:
                    pass
                raise
        except OSError as exc:
            raise StorageError(
                f"failed to store {module.user_id}/{module.name}: {exc}"
            ) from exc
        return stored

    def load(self, user_id: str, name: str) -> CodeModule:
        """Re-read a module from disk and verify it against the index.

        Callers invoke this at every iteration boundary; the returned module
        is whatever is on disk right now, not a cached parse.
        """
        path = self._path(user_id, name)
        signature = ""
        entry = None
        # Replacement is atomic (rename + index update under the lock), so a
        # read that matches the index snapshot taken either side of it saw a
        # whole live version. Only a file changed behind the store's back
        # keeps mismatching.
        for _ in range(6):
            with self._lock:
                before = self._entries.get((user_id, name))
            if before is None:
                raise NotFoundError(f"no module {name!r} deployed by user {user_id!r}")
            try:
                raw = path.read_bytes()
            except FileNotFoundError as exc:
                raise IntegrityError(
                    f"module file for {user_id}/{name} is missing on disk"
                ) from exc
            except OSError as exc:
                raise StorageError(f"failed to read {path}: {exc}") from exc
            signature = compute_signature(raw.decode("utf-8"))
            with self._lock:
                after = self._entries.get((user_id, name))
            for entry in (before, after):
                if entry is not None and signature == entry.signature:
                    return CodeModule(
                        user_id=user_id,
                        name=name,
                        code=raw.decode("utf-8"),
                        signature=signature,
                        deployed_at=entry.deployed_at,
                    )
        raise IntegrityError(
            f"module {user_id}/{name} on disk hashes to {signature}, "
            f"index says {entry.signature if entry else None}"
        )

    def has(self, user_id: str, name: str) -> bool:
        with self._lock:
            return (user_id, name) in self._entries

    def signature_of(self, user_id: str, name: str) -> str | None:
        with self._lock:
            entry = self._entries.get((user_id, name))
        return entry.signature if entry else None

    def entries(self) -> dict[tuple[str, str], CodeModule]:
        with self._lock:
            return dict(self._entries)
