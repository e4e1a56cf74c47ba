from .common import TxnRequest, hot_set_size, pick_distinct
from .smallbank import SmallBankConfig, gen_multitransfer
from .marketplace import MarketplaceConfig, build_marketplace, gen_marketplace_txn

__all__ = [
    "TxnRequest",
    "hot_set_size",
    "pick_distinct",
    "SmallBankConfig",
    "gen_multitransfer",
    "MarketplaceConfig",
    "build_marketplace",
    "gen_marketplace_txn",
]
