"""lbsim: a packet-level L7 load balancer with a deterministic network simulator.

Core pieces:
  packet       packet/flow-key data model, wrapping seq arithmetic, trace codec
  conntable    concurrent cuckoo connection table (version-checked lock-free reads)
  splice       TCP splicing agent: handshake, header insertion, seq/ACK rewriting
  flow_engine  simulated match-action engine with rule-update latency model
  offload      offload manager: threshold decision, rule lifecycle, batched deletes
  netsim       discrete-event network with miniature TCP endpoints and HTTP apps
  bench        workloads, oracles, metrics, table bench
  api / cli    FastAPI service wrapping the above; CLI as a thin client
"""

__version__ = "0.1.0"
