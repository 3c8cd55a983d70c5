"""Benchmark workloads and the closed-loop clients that drive them."""
import logging
from typing import Callable, List, Optional

import numpy as np

from models.core import Constraint
from models.txn import TxnHandle, TxnOutcome
from schemas.workload import WorkloadKind, WorkloadSpec
from services.cluster import Cluster
from services.coordinator import CoordinatorNode, TxnContext
from services.network import US_PER_S

logger = logging.getLogger(__name__)

STOCK = "stock"
NON_NEGATIVE_STOCK = Constraint(STOCK, lower=0)
KILL_WINDOW = 12  # a killed coordinator dies within this many messages of the transaction start


def item_key(index: int) -> str:
    return f"item:{index}"


def user_key(index: int) -> str:
    return f"user:{index}"


class Workload:
    """Populates the store and produces transaction bodies"""

    def __init__(self, spec: WorkloadSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.commutative = spec.protocol.commutative

    def populate(self, cluster: Cluster) -> None:
        for index in range(self.spec.items):
            cluster.seed(item_key(index), {STOCK: self.spec.initial_stock})
        if self.spec.kind is WorkloadKind.TPCW_LITE:
            for index in range(self.spec.users):
                cluster.seed(user_key(index), {"name": f"customer-{index}", "orders": 0})
        logger.info(f"Populated {self.spec.items} item(s) for {self.spec.kind.value}")

    def _basket(self):
        spec = self.spec
        count = int(self.rng.integers(1, min(spec.max_items_per_txn, spec.items) + 1))
        items: List[int] = []
        while len(items) < count:
            item = int(self.rng.integers(0, spec.items))
            if item not in items:
                items.append(item)
        amounts = self.rng.integers(1, spec.max_decrement + 1, size=count)
        return [(item_key(item), int(amount)) for item, amount in zip(items, amounts)]

    def next_body(self) -> Callable[[TxnContext], object]:
        basket = self._basket()
        if self.spec.kind is WorkloadKind.TPCW_LITE:
            return self._ordering(basket, int(self.rng.integers(0, self.spec.users)))
        return self._purchase(basket)

    def _decrement(self, ctx: TxnContext, key: str, amount: int):
        """Stock decrement as a commutative update or a read-modify-write"""
        if self.commutative:
            ctx.add(key, {STOCK: -amount}, [NON_NEGATIVE_STOCK])
            return
        row = yield ctx.read(key)
        if row is None or row.get(STOCK, 0) < amount:
            ctx.abort(f"{key} is out of stock")
        ctx.write(key, {**row, STOCK: row[STOCK] - amount})

    def _purchase(self, basket):
        def purchase(ctx: TxnContext):
            for key, amount in basket:
                yield from self._decrement(ctx, key, amount)
        return purchase

    def _ordering(self, basket, user: int):
        def order(ctx: TxnContext):
            customer = yield ctx.read(user_key(user))
            if customer is None:
                ctx.abort(f"unknown customer {user}")
            order_key = f"order:{ctx.txn_id}"
            ctx.insert(order_key, {"customer": user, "lines": len(basket)})
            for line, (key, amount) in enumerate(basket):
                yield ctx.read(key)
                ctx.insert(f"orderline:{ctx.txn_id}:{line}", {"item": key, "qty": amount})
                yield from self._decrement(ctx, key, amount)
        return order


class ClosedLoopClient:
    """Issues one transaction at a time until the run ends; replaces its coordinator if it crashes"""

    def __init__(self, index: int, dc: str, cluster: Cluster, workload: Workload, end_us: int):
        self.index = index
        self.dc = dc
        self.cluster = cluster
        self.workload = workload
        self.end_us = end_us
        self.protocol = workload.spec.protocol.coordinator_protocol
        self.coordinator = cluster.add_coordinator(dc, self.protocol)
        self.retired: List[CoordinatorNode] = []
        self.issued = 0
        self.slo_us = workload.spec.slo_ms * 1000

    @property
    def network(self):
        return self.cluster.network

    def start(self, offset_us: int = 0) -> None:
        self.network.schedule(offset_us, self.next)

    def next(self) -> None:
        if self.network.now >= self.end_us:
            return
        spec = self.workload.spec
        if spec.kill_probability > 0 and self.workload.rng.random() < spec.kill_probability:
            self.coordinator.arm_crash(int(self.workload.rng.integers(1, KILL_WINDOW + 1)))
        self.issued += 1
        handle = self.coordinator.execute_transaction(self.workload.next_body(), self.slo_us, on_done=self._done)
        if not handle.decided:
            self.network.schedule(self.slo_us, lambda: self._watch(handle))

    def _done(self, handle: TxnHandle) -> None:
        # next transaction starts from a fresh event, not inside the deciding handler
        self.network.schedule(0, self.next)

    def _watch(self, handle: TxnHandle) -> None:
        if handle.outcome is not TxnOutcome.PENDING or self.coordinator.up:
            return
        lost = self.coordinator.abandon_pending()
        logger.info(f"client {self.index}: coordinator {self.coordinator.node_id} is down with "
                    f"{lost} transaction(s) in flight, starting a new one")
        self.retired.append(self.coordinator)
        self.coordinator = self.cluster.add_coordinator(self.dc, self.protocol)
        self.next()

    def coordinators(self) -> List[CoordinatorNode]:
        return self.retired + [self.coordinator]


def start_clients(spec: WorkloadSpec, cluster: Cluster, workload: Workload, end_us: int,
                  rng: Optional[np.random.Generator] = None) -> List[ClosedLoopClient]:
    dcs = spec.client_dcs or [cluster.network.config.home_dc]
    clients = []
    for index in range(spec.clients):
        client = ClosedLoopClient(index, dcs[index % len(dcs)], cluster, workload, end_us)
        # stagger start times over the first millisecond
        offset = int(rng.integers(0, 1000)) if rng is not None else 0
        client.start(offset)
        clients.append(client)
    logger.info(f"Started {len(clients)} {spec.protocol.value} client(s) in {dcs}")
    return clients


def duration_us(spec: WorkloadSpec) -> int:
    return int(spec.duration_s * US_PER_S)
