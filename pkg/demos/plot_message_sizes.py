"""
What goes over the wire
=======================

Uplink messages carry only the trainable factors plus the head. Sizes are
the length of the encoded bytes, not an estimate.
"""

from fedlora import FreezePhase
from fedlora.metrics import AdapterShape, message_size_bytes
from fedlora.wire import decode

layout = [AdapterShape(768, 768, 8)] * 12   # a BERT-base-sized stack, adapters only

for phase in FreezePhase:
    for bits in (32, 16):
        size = message_size_bytes(layout, phase, precision=bits)
        print(f"{phase.value:9s} fp{bits}: {size / 1024:8.1f} KiB")

# a real message from one round of local training
from fedlora import Strategy, from_dict
from fedlora.experiment import prepare, train_config
from fedlora.fedcore import ServerState, local_train, make_clients, synchronize
from fedlora.linalg import Rng

cfg = from_dict({"task": {"kind": "synthetic_classification", "d": 16, "n_train": 300},
                 "model": {"hidden": [16, 16], "rank": 4, "pretrain_epochs": 3},
                 "federation": {"num_clients": 3, "rounds": 1}})
setup = prepare(cfg, 0)
server = ServerState(setup.model.replica(), Strategy.ROLORA, train_config(cfg), setup.loss, setup.test)
client = make_clients(server.model, setup.shards, Rng(0).spawn(12))[0]
synchronize(client, server)
msg = local_train(client, FreezePhase.FREEZE_A, server.config, server.loss, 1)
blob = msg.to_bytes()
print(len(blob), "bytes;", "adapter part", msg.adapter_bytes())
print([(layer, kind.name, m.shape) for layer, kind, m in decode(blob).entries])
