"""SmallBank MultiTransfer: withdraw on one actor, deposit on three others."""

from __future__ import annotations

import random
from dataclasses import dataclass
from decimal import Decimal

from ..errors import ConfigError, InsufficientActors
from ..runtime import Runtime, TransactionalActor
from ..scheduler import AccessSpec
from ..state import RW
from ..values import QUANTUM, ActorId, Key, dec
from .common import TxnRequest, pick_distinct

GROUP = "SmallBank"
INITIAL_BALANCE = dec("10000")


@dataclass
class SmallBankConfig:
    num_actor: int = 8
    actor_size: int = 16
    txn_size: int = 1
    # fractions in (0, 1]; 1 means uniform
    actor_skew: float = 1.0
    key_skew: float = 1.0
    actors_per_txn: int = 4
    min_amount: str = "1"
    max_amount: str = "100"

    def validate(self) -> None:
        if self.num_actor < self.actors_per_txn:
            raise InsufficientActors(f"need at least {self.actors_per_txn} actors, got {self.num_actor}")
        if not 1 <= self.txn_size <= self.actor_size:
            raise ConfigError("txn_size must be within 1..actor_size")
        for name in ("actor_skew", "key_skew"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")

    @classmethod
    def from_dict(cls, d: dict) -> SmallBankConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @property
    def total_keys(self) -> int:
        return self.num_actor * self.actor_size


def actor_id(i: int) -> ActorId:
    return ActorId(GROUP, i)


def account(j: int) -> Key:
    return Key("account", str(j))


class SmallBankActor(TransactionalActor):
    async def multi_transfer(self, ctx, args):
        withdraw, deposits = args["withdraw"], args["deposits"]
        ds = await self.get_state(ctx, {k: RW for k, _ in withdraw})
        for k, amount in withdraw:
            ds.put(k, ds.get(k) - amount)
        await self.call_many(ctx, [(a, "deposit", items) for a, items in deposits])
        return len(deposits)

    async def deposit(self, ctx, items):
        ds = await self.get_state(ctx, {k: RW for k, _ in items})
        for k, amount in items:
            ds.put(k, ds.get(k) + amount)
        return None


def populate(runtime: Runtime, cfg: SmallBankConfig) -> list[ActorId]:
    runtime.register_group(GROUP, SmallBankActor)
    ids = [actor_id(i) for i in range(cfg.num_actor)]
    for a in ids:
        runtime.actor(a).seed({account(j): INITIAL_BALANCE for j in range(cfg.actor_size)})
    return ids


def _amount(rng: random.Random, lo: Decimal, hi: Decimal) -> Decimal:
    steps = int((hi - lo) / QUANTUM)
    return (lo + rng.randint(0, steps) * QUANTUM).quantize(QUANTUM)


def gen_multitransfer(cfg: SmallBankConfig, rng: random.Random) -> TxnRequest:
    """One MultiTransfer with a key-level access spec."""
    cfg.validate()
    actors = sorted(pick_distinct(rng, cfg.num_actor, cfg.actor_skew, cfg.actors_per_txn))
    keys = {a: sorted(pick_distinct(rng, cfg.actor_size, cfg.key_skew, cfg.txn_size)) for a in actors}
    lo, hi = dec(cfg.min_amount), dec(cfg.max_amount)
    deposits = []
    total = Decimal(0)
    for a in actors[1:]:
        items = []
        for j in keys[a]:
            amt = _amount(rng, lo, hi)
            total += amt
            items.append((account(j), amt))
        deposits.append((actor_id(a), items))
    root_keys = keys[actors[0]]
    share = (total / len(root_keys)).quantize(QUANTUM, rounding="ROUND_DOWN")
    withdraw = [(account(j), share) for j in root_keys]
    last_k, _ = withdraw[-1]
    withdraw[-1] = (last_k, (total - share * (len(root_keys) - 1)).quantize(QUANTUM))
    spec = AccessSpec()
    spec.add(actor_id(actors[0]), {k: RW for k, _ in withdraw})
    for a, items in deposits:
        spec.add(a, {k: RW for k, _ in items})
    args = {"withdraw": withdraw, "deposits": deposits}
    return TxnRequest("MultiTransfer", actor_id(actors[0]), "multi_transfer", args, spec)


def apply_serial(model: dict, req: TxnRequest) -> None:
    """Reference semantics on a plain {(actor, key): balance} map."""
    for k, amount in req.args["withdraw"]:
        model[(req.root, k)] -= amount
    for a, items in req.args["deposits"]:
        for k, amount in items:
            model[(a, k)] += amount


def initial_model(cfg: SmallBankConfig) -> dict:
    return {(actor_id(i), account(j)): INITIAL_BALANCE for i in range(cfg.num_actor) for j in range(cfg.actor_size)}


def total_balance(source, cfg: SmallBankConfig) -> Decimal:
    """Sum of all balances; ``source`` is a Runtime or ActorId -> ActorState."""
    states = source.states() if isinstance(source, Runtime) else source
    return sum((states[actor_id(i)].kv[account(j)]
                for i in range(cfg.num_actor) for j in range(cfg.actor_size)), Decimal(0))


def expected_total(cfg: SmallBankConfig) -> Decimal:
    return INITIAL_BALANCE * cfg.total_keys
