"""Bridge-side failure types. The CLI maps them onto nonzero exit codes."""


class BridgeError(Exception):
    """Base for all bridge failures."""


class CorpusError(BridgeError):
    """The prompt dump or image corpus is malformed or inconsistent."""


class MissingImagesError(BridgeError):
    """Items without readable images; carries the reject list."""

    def __init__(self, rejects: list[str], rejects_path):
        self.rejects = rejects
        self.rejects_path = str(rejects_path)
        super().__init__(
            f"{len(rejects)} items have unreadable images "
            f"(listed in {rejects_path}); rerun with --allow-missing to substitute "
            f"the mean-image placeholder"
        )


class StoreError(BridgeError):
    """An emitted or validated store violates the wire format."""


class EncoderError(BridgeError):
    """The requested encoder or checkpoint cannot be used."""
