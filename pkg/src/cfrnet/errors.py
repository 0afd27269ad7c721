class ContractError(ValueError):
    """An operation received arguments violating its contract."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"non-finite values produced by op '{op}'" + (f": {detail}" if detail else ""))
