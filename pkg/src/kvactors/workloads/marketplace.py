"""Scaled Online Marketplace with three system-enforced dependencies.

* D1: cart item replicas follow the product record ("replicate"), registered
  by AddItemToCart and dropped by DeleteItemInCart.
* D2: each product's stock key is delete-dependent on the product.
* D3: every shipment actor keeps a per-seller shipment counter; the seller's
  ``orders_view`` key is the ``sum_delta`` view over all of them.

Checkout reads the cart (and current product records), decrements stock,
creates an order, a payment and one shipment per seller, and the counters
bump the seller views through D3. Checkout leaves cart contents in place.
"""

from __future__ import annotations

import random
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import Decimal

from ..dependency import delete_dep, update_dep
from ..errors import ConfigError, LeaderKeyMissing
from ..runtime import Runtime, TransactionalActor
from ..scheduler import AccessSpec
from ..state import ActorState, R, RW
from ..values import QUANTUM, ActorId, Key, Record, dec
from .common import TxnRequest, pick_distinct

DEFAULT_MIX = {"AddItemToCart": 30, "DeleteItemInCart": 20, "UpdatePrice": 10, "Checkout": 40}
INITIAL_STOCK = 1_000_000

CUSTOMER, SELLER, PRODUCT, STOCK, CART, ORDER, PAYMENT, SHIPMENT = (
    "Customer", "Seller", "Product", "Stock", "Cart", "Order", "Payment", "Shipment")


@dataclass
class MarketplaceConfig:
    sellers: int = 10
    products_per_seller: int = 100
    customers: int = 100
    # actor counts for the groups that are not one-per-seller or one-per-customer
    customer_actors: int = 4
    order_actors: int = 4
    payment_actors: int = 4
    shipment_actors: int = 4
    mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    checkout_items: tuple = (1, 5)
    actor_skew: float = 1.0
    key_skew: float = 1.0
    initial_cart_items: int = 2

    def validate(self) -> None:
        if sum(self.mix.values()) != 100:
            raise ConfigError(f"transaction mix must sum to 100, got {sum(self.mix.values())}")
        unknown = set(self.mix) - set(DEFAULT_MIX) - {"DeleteProduct"}
        if unknown:
            raise ConfigError(f"unknown transaction types {sorted(unknown)}")
        lo, hi = self.checkout_items
        if not 1 <= lo <= hi:
            raise ConfigError("checkout_items must be a range within 1..")
        if min(self.sellers, self.products_per_seller, self.customers) < 1:
            raise ConfigError("sellers, products and customers must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> MarketplaceConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "checkout_items" in known:
            known["checkout_items"] = tuple(known["checkout_items"])
        return cls(**known)


# -- naming ---------------------------------------------------------------

def product_id(seller: int, j: int) -> str:
    return f"{seller}-{j}"


def seller_of(pid: str) -> int:
    return int(pid.split("-", 1)[0])


def product_key(pid: str) -> Key:
    return Key("product", pid)


def stock_key(pid: str) -> Key:
    return Key("stock", pid)


def item_key(pid: str) -> Key:
    return Key("item", pid)


def qty_key(pid: str) -> Key:
    return Key("qty", pid)


def shipcount_key(seller: int) -> Key:
    return Key("shipcount", str(seller))


def view_key(seller: int) -> Key:
    return Key("orders_view", str(seller))


def order_key(oid: str) -> Key:
    return Key("order", oid)


def payment_key(oid: str) -> Key:
    return Key("payment", oid)


def shipment_key(oid: str, seller: int) -> Key:
    return Key("shipment", f"{oid}/{seller}")


class Layout:
    """Actor placement for a config."""

    def __init__(self, cfg: MarketplaceConfig):
        self.cfg = cfg

    def product(self, seller: int) -> ActorId:
        return ActorId(PRODUCT, seller)

    def stock(self, seller: int) -> ActorId:
        return ActorId(STOCK, seller)

    def seller(self, seller: int) -> ActorId:
        return ActorId(SELLER, seller)

    def cart(self, customer: int) -> ActorId:
        return ActorId(CART, customer)

    def customer(self, customer: int) -> ActorId:
        return ActorId(CUSTOMER, customer % self.cfg.customer_actors)

    def order(self, customer: int) -> ActorId:
        return ActorId(ORDER, customer % self.cfg.order_actors)

    def payment(self, customer: int) -> ActorId:
        return ActorId(PAYMENT, customer % self.cfg.payment_actors)

    def shipment(self, customer: int) -> ActorId:
        return ActorId(SHIPMENT, customer % self.cfg.shipment_actors)

    def shipments(self) -> list[ActorId]:
        return [ActorId(SHIPMENT, i) for i in range(self.cfg.shipment_actors)]


# -- actors ---------------------------------------------------------------

class CartActor(TransactionalActor):
    async def add_item(self, ctx, args):
        pid, seller, qty = args["pid"], args["seller"], args["qty"]
        ds = await self.get_state(ctx, {item_key(pid): RW, qty_key(pid): RW})
        if ds.get(item_key(pid)) is not None:
            ds.put(qty_key(pid), ds.get(qty_key(pid)) + qty)
            return "incremented"
        record = update_dep(ActorId(PRODUCT, seller), product_key(pid), self.id, item_key(pid), "replicate")
        try:
            await self.register_dependency(ctx, record)
        except LeaderKeyMissing:
            return "missing"
        ds.put(qty_key(pid), qty)
        return "added"

    async def delete_item(self, ctx, args):
        pid = args["pid"]
        ds = await self.get_state(ctx, {item_key(pid): RW, qty_key(pid): RW})
        if ds.get(item_key(pid)) is None:
            return "absent"
        ds.delete(item_key(pid))
        if ds.get(qty_key(pid)) is not None:
            ds.delete(qty_key(pid))
        return "deleted"

    async def checkout(self, ctx, args):
        oid, customer, pids = args["oid"], args["customer"], args["pids"]
        ds = await self.get_state(ctx, {k: R for p in pids for k in (item_key(p), qty_key(p))})
        lines = []
        for p in pids:
            item = ds.get(item_key(p))
            if item is not None:
                lines.append((p, item, ds.get(qty_key(p))))
        by_seller = defaultdict(list)
        for p, item, qty in lines:
            by_seller[seller_of(p)].append((p, item, qty))
        sellers = sorted(by_seller)
        calls = []
        for s in sellers:
            calls.append((ActorId(PRODUCT, s), "read_products", [p for p, _, _ in by_seller[s]]))
            calls.append((ActorId(STOCK, s), "take_stock", [(p, q) for p, _, q in by_seller[s]]))
        if calls:
            await self.call_many(ctx, calls)
        total = sum((item["price"] * qty for _, item, qty in lines), Decimal(0)).quantize(QUANTUM)
        order = Record(customer=customer, total=total, sellers=",".join(map(str, sellers)), lines=len(lines))
        layout = args["actors"]
        await self.call_many(ctx, [
            (layout["order"], "create_order", (oid, order)),
            (layout["payment"], "pay", (oid, Record(customer=customer, amount=total))),
            (layout["shipment"], "ship", (oid, sellers)),
        ])
        return total


class ProductActor(TransactionalActor):
    async def read_products(self, ctx, pids):
        ds = await self.get_state(ctx, {product_key(p): R for p in pids})
        return [ds.get(product_key(p)) for p in pids]

    async def update_price(self, ctx, args):
        pid, price = args["pid"], args["price"]
        ds = await self.get_state(ctx, {product_key(pid): RW})
        current = ds.get(product_key(pid))
        if current is None:
            return None
        ds.put(product_key(pid), current.replace(price=price))
        return len(ds.deps_of(product_key(pid)))

    async def delete_product(self, ctx, args):
        pid = args["pid"]
        ds = await self.get_state(ctx, {product_key(pid): RW})
        if ds.get(product_key(pid)) is None:
            return False
        ds.delete(product_key(pid))
        return True


class StockActor(TransactionalActor):
    async def take_stock(self, ctx, lines):
        ds = await self.get_state(ctx, {stock_key(p): RW for p, _ in lines})
        for p, qty in lines:
            have = ds.get(stock_key(p))
            if have is not None:
                ds.put(stock_key(p), max(0, have - qty))
        return None

    async def attach_products(self, ctx, pids):
        for p in pids:
            await self.register_dependency(ctx, delete_dep(ActorId(PRODUCT, self.id.partition), product_key(p),
                                                           self.id, stock_key(p)))
        return len(pids)


class SellerActor(TransactionalActor):
    async def attach_shipments(self, ctx, shipments):
        s = self.id.partition
        for sh in shipments:
            await self.register_dependency(ctx, update_dep(sh, shipcount_key(s), self.id, view_key(s), "sum_delta"))
        return len(shipments)


class OrderActor(TransactionalActor):
    async def create_order(self, ctx, args):
        oid, order = args
        ds = await self.get_state(ctx, {order_key(oid): RW})
        ds.put(order_key(oid), order)


class PaymentActor(TransactionalActor):
    async def pay(self, ctx, args):
        oid, payment = args
        ds = await self.get_state(ctx, {payment_key(oid): RW})
        ds.put(payment_key(oid), payment)


class ShipmentActor(TransactionalActor):
    async def ship(self, ctx, args):
        oid, sellers = args
        keys = {shipment_key(oid, s): RW for s in sellers}
        keys.update({shipcount_key(s): RW for s in sellers})
        ds = await self.get_state(ctx, keys)
        for s in sellers:
            ds.put(shipment_key(oid, s), Record(order=oid, seller=s))
            ds.put(shipcount_key(s), ds.get(shipcount_key(s)) + 1)


class CustomerActor(TransactionalActor):
    pass


GROUP_CLASSES = {
    CUSTOMER: CustomerActor, SELLER: SellerActor, PRODUCT: ProductActor, STOCK: StockActor,
    CART: CartActor, ORDER: OrderActor, PAYMENT: PaymentActor, SHIPMENT: ShipmentActor,
}


# -- access specs ---------------------------------------------------------

def add_item_spec(layout: Layout, customer: int, pid: str) -> AccessSpec:
    spec = AccessSpec()
    spec.add(layout.cart(customer), {item_key(pid): RW, qty_key(pid): RW})
    spec.add(layout.product(seller_of(pid)), {product_key(pid): RW})
    return spec


def delete_item_spec(layout: Layout, customer: int, pid: str) -> AccessSpec:
    # the product is reached by the de-registration forward
    return add_item_spec(layout, customer, pid)


def checkout_spec(layout: Layout, customer: int, oid: str, pids: list[str]) -> AccessSpec:
    spec = AccessSpec()
    spec.add(layout.cart(customer), {k: R for p in pids for k in (item_key(p), qty_key(p))})
    sellers = sorted({seller_of(p) for p in pids})
    for s in sellers:
        mine = [p for p in pids if seller_of(p) == s]
        spec.add(layout.product(s), {product_key(p): R for p in mine})
        spec.add(layout.stock(s), {stock_key(p): RW for p in mine})
        spec.add(layout.seller(s), {view_key(s): RW})
    spec.add(layout.order(customer), {order_key(oid): RW})
    spec.add(layout.payment(customer), {payment_key(oid): RW})
    keys = {shipment_key(oid, s): RW for s in sellers}
    keys.update({shipcount_key(s): RW for s in sellers})
    spec.add(layout.shipment(customer), keys)
    return spec


# -- population -----------------------------------------------------------

async def build_marketplace(runtime: Runtime, cfg: MarketplaceConfig, seed: int = 0) -> MarketplaceModel:
    """Seed products/stock, register D2 and D3, and pre-fill carts (D1)."""
    cfg.validate()
    for group, cls in GROUP_CLASSES.items():
        runtime.register_group(group, cls)
    layout = Layout(cfg)
    rng = random.Random(seed)
    for s in range(cfg.sellers):
        products = {product_key(product_id(s, j)): Record(name=f"product {s}-{j}", seller=s,
                                                          price=dec(rng.randint(100, 10000)) / 100)
                    for j in range(cfg.products_per_seller)}
        runtime.actor(layout.product(s)).seed(products)
        runtime.actor(layout.stock(s)).seed({stock_key(product_id(s, j)): INITIAL_STOCK
                                              for j in range(cfg.products_per_seller)})
        runtime.actor(layout.seller(s)).seed({Key("seller", "info"): Record(name=f"seller {s}")})
    for sh in layout.shipments():
        runtime.actor(sh).seed({shipcount_key(s): 0 for s in range(cfg.sellers)})
    for c in range(cfg.customers):
        runtime.actor(layout.customer(c)).seed({Key("customer", str(c)): Record(name=f"customer {c}")})

    handles = []
    for s in range(cfg.sellers):
        pids = [product_id(s, j) for j in range(cfg.products_per_seller)]
        spec = AccessSpec()
        spec.add(layout.stock(s), {stock_key(p): RW for p in pids})
        spec.add(layout.product(s), {product_key(p): RW for p in pids}, count=len(pids))
        handles.append(runtime.submit_pact(layout.stock(s), "attach_products", pids, spec))
        spec = AccessSpec()
        spec.add(layout.seller(s), {view_key(s): RW})
        for sh in layout.shipments():
            spec.add(sh, {shipcount_key(s): RW})
        handles.append(runtime.submit_pact(layout.seller(s), "attach_shipments", layout.shipments(), spec))
    for h in handles:
        await h

    model = MarketplaceModel(cfg, rng)
    handles = []
    for c in range(cfg.customers):
        for _ in range(cfg.initial_cart_items):
            req = model.add_item(c)
            if req is not None:
                handles.append(runtime.submit_pact(req.root, req.method, req.args, req.spec))
    for h in handles:
        await h
    return model


class MarketplaceModel:
    """Generator-side knowledge of cart contents, used to draw valid requests."""

    def __init__(self, cfg: MarketplaceConfig, rng: random.Random):
        self.cfg = cfg
        self.layout = Layout(cfg)
        self.rng = rng
        self.carts: dict[int, set[str]] = defaultdict(set)
        self.deleted: set[str] = set()
        self.orders = 0

    def pick_product(self, rng: random.Random) -> str:
        s = pick_distinct(rng, self.cfg.sellers, self.cfg.actor_skew, 1)[0]
        j = pick_distinct(rng, self.cfg.products_per_seller, self.cfg.key_skew, 1)[0]
        return product_id(s, j)

    def add_item(self, customer: int, rng: random.Random | None = None) -> TxnRequest | None:
        rng = rng or self.rng
        pid = self.pick_product(rng)
        self.carts[customer].add(pid)
        args = {"pid": pid, "seller": seller_of(pid), "qty": rng.randint(1, 3)}
        return TxnRequest("AddItemToCart", self.layout.cart(customer), "add_item", args,
                          add_item_spec(self.layout, customer, pid))


def gen_marketplace_txn(model: MarketplaceModel, rng: random.Random, customers: list[int] | None = None,
                        client: int = 0) -> TxnRequest:
    """Draw one request by the mix. ``customers`` restricts the client's customers."""
    cfg = model.cfg
    layout = model.layout
    customers = customers if customers is not None else list(range(cfg.customers))
    kind = draw_kind(cfg.mix, rng)
    if kind == "AddItemToCart":
        return model.add_item(rng.choice(customers), rng)
    if kind == "DeleteItemInCart":
        c = rng.choice(customers)
        if model.carts[c]:
            pid = rng.choice(sorted(model.carts[c]))
            model.carts[c].discard(pid)
        else:
            pid = model.pick_product(rng)
        return TxnRequest(kind, layout.cart(c), "delete_item", {"pid": pid}, delete_item_spec(layout, c, pid))
    if kind == "UpdatePrice":
        pid = model.pick_product(rng)
        price = dec(rng.randint(100, 10000)) / 100
        return TxnRequest(kind, layout.product(seller_of(pid)), "update_price", {"pid": pid, "price": price})
    if kind == "DeleteProduct":
        pid = model.pick_product(rng)
        model.deleted.add(pid)
        return TxnRequest(kind, layout.product(seller_of(pid)), "delete_product", {"pid": pid})
    c = rng.choice(customers)
    full = [x for x in customers if model.carts[x]]
    if not model.carts[c] and full:
        c = rng.choice(full)
    cart = sorted(model.carts[c])
    if not cart:
        # nothing to buy for any of this client's customers
        return model.add_item(c, rng)
    lo, hi = cfg.checkout_items
    n = min(len(cart), rng.randint(lo, hi))
    pids = sorted(rng.sample(cart, n))
    model.orders += 1
    oid = f"{client}-{model.orders}"
    args = {"oid": oid, "customer": c, "pids": pids,
            "actors": {"order": layout.order(c), "payment": layout.payment(c), "shipment": layout.shipment(c)}}
    return TxnRequest("Checkout", layout.cart(c), "checkout", args, checkout_spec(layout, c, oid, pids))


def draw_kind(mix: dict, rng: random.Random) -> str:
    x = rng.random() * 100
    acc = 0.0
    for kind in sorted(mix):
        acc += mix[kind]
        if x < acc:
            return kind
    return sorted(mix)[-1]


# -- integrity checks -----------------------------------------------------

def check_integrity(source, cfg: MarketplaceConfig) -> dict[str, list[str]]:
    """Return violations for D1, D2 and D3 (empty lists mean all hold).

    ``source`` is a Runtime or a mapping ActorId -> ActorState.
    """
    layout = Layout(cfg)
    states = source.states() if isinstance(source, Runtime) else source

    def state_of(actor):
        st = states.get(actor)
        return st if st is not None else ActorState(actor)

    problems = {"D1": [], "D2": [], "D3": []}
    products = {}
    for s in range(cfg.sellers):
        st = state_of(layout.product(s))
        for k, v in st.kv.items():
            if k.namespace == "product":
                products[k.id] = v
    # D1: replicas with a live record match the product
    for c in range(cfg.customers):
        st = state_of(layout.cart(c))
        for k, v in st.kv.items():
            if k.namespace != "item":
                continue
            records = st.deps_of(k)
            if k.id in products:
                if not records:
                    problems["D1"].append(f"{layout.cart(c)} {k} has no dependency on a live product")
                elif v != products[k.id]:
                    problems["D1"].append(f"{layout.cart(c)} {k} = {v!r}, product = {products[k.id]!r}")
            elif records:
                problems["D1"].append(f"{layout.cart(c)} {k} still registered to deleted product")
    # D2: stock exists iff product exists, and every record has both ends
    for s in range(cfg.sellers):
        stock = state_of(layout.stock(s))
        prod = state_of(layout.product(s))
        for k in stock.kv:
            if k.id not in products:
                problems["D2"].append(f"stock {k} outlived its product")
        for k in prod.kv:
            if stock_key(k.id) not in stock.kv:
                problems["D2"].append(f"product {k} has no stock")
        for st in (stock, prod):
            for _, r in st.all_records():
                if r.dep_type.name != "DELETE":
                    continue
                if r.leader_key not in prod.kv or r.follower_key not in stock.kv:
                    problems["D2"].append(f"dangling {r}")
    # D3: view = number of orders that include the seller
    counts = defaultdict(int)
    for o in range(cfg.order_actors):
        for k, v in state_of(ActorId(ORDER, o)).kv.items():
            if k.namespace == "order" and v["sellers"]:
                for s in v["sellers"].split(","):
                    counts[int(s)] += 1
    for s in range(cfg.sellers):
        view = state_of(layout.seller(s)).get(view_key(s))
        if view != counts[s]:
            problems["D3"].append(f"seller {s} view {view} != recount {counts[s]}")
    return problems
