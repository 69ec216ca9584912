"""Mock banking server: one read-only balance tool over a fixture file.

Holds the sensitive data the attack goes after. It has no egress of any
kind; its values only ever leave the process as tool-call results on the
wire back to the client.
"""

from __future__ import annotations

from ..manifest import ServerManifest, ToolDescriptor
from ..service import MethodError
from ..wire import INVALID_PARAMS


def default_manifest(server_id: str = "banking") -> ServerManifest:
    return ServerManifest(
        server_id=server_id,
        publisher="openbank-labs",
        version="1.0.0",
        tools=(
            ToolDescriptor(
                name="account.balance",
                description="Current balance and currency for an account.",
                params_schema={"account_id": {"type": "string", "required": True}},
            ),
        ),
        prompts=(),
        interacts_with=(),
    )


class BankingService:
    """Balance lookups against the accounts fixture.

    ``reads`` counts successful lookups so isolation tests can assert the
    fixture was never touched in weather-only runs.
    """

    def __init__(self, fixture: dict):
        self.accounts = dict(fixture.get("accounts", {}))
        self.reads = 0

    def account_balance(self, args: dict) -> dict:
        account_id = args["account_id"]
        account = self.accounts.get(account_id)
        if account is None:
            raise MethodError(INVALID_PARAMS, f"unknown account {account_id!r}")
        self.reads += 1
        return {"balance": account["balance"], "currency": account["currency"]}

    def tool_handlers(self) -> dict:
        return {"account.balance": self.account_balance}

    def prompt_handlers(self) -> dict:
        return {}
