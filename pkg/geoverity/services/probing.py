"""probing.py — RTT probes from a verifier to a server that runs no cooperating code.

Two layers are sampled:
  tcp_handshake          connect() latency, which is one SYN / SYN-ACK round trip
  http_request_response  HEAD / on an already open keep-alive connection
"""

from __future__ import annotations

import asyncio
import logging
import time

from aiohttp import ClientError, ClientSession, ClientTimeout, TCPConnector

from geoverity.enums import ProbeLayer
from geoverity.services.slv import IpAddress, ProbeFailedError, ProbeSample, VerifierSite

logger = logging.getLogger(__name__)

DEFAULT_PROBE_TIMEOUT_S = 5.0


def _host(ip: IpAddress) -> str:
    return f"[{ip}]" if ip.version == 6 else str(ip)


async def tcp_handshake_rtt(ip: IpAddress, port: int = 80, *, timeout_s: float = DEFAULT_PROBE_TIMEOUT_S) -> float:
    started = time.perf_counter()
    _, writer = await asyncio.wait_for(asyncio.open_connection(str(ip), port), timeout_s)
    rtt_ms = (time.perf_counter() - started) * 1000.0
    writer.close()
    try:
        await writer.wait_closed()
    except (ConnectionError, OSError):
        pass
    return rtt_ms


async def http_rtts(
    ip: IpAddress,
    count: int,
    port: int = 80,
    *,
    timeout_s: float = DEFAULT_PROBE_TIMEOUT_S,
) -> list[float]:
    """``count`` request/response times over one reused connection (the warm-up is not counted)."""
    url = f"http://{_host(ip)}:{port}/"
    rtts: list[float] = []
    connector = TCPConnector(limit=1, force_close=False)
    async with ClientSession(connector=connector, timeout=ClientTimeout(total=timeout_s)) as session:
        async with session.head(url, allow_redirects=False) as resp:
            await resp.read()
        for _ in range(count):
            started = time.perf_counter()
            async with session.head(url, allow_redirects=False) as resp:
                await resp.read()
            rtts.append((time.perf_counter() - started) * 1000.0)
    return rtts


class NetworkProber:
    """Probes from the local host; ``verifier`` only labels the samples."""

    def __init__(self, *, port: int = 80, timeout_s: float = DEFAULT_PROBE_TIMEOUT_S) -> None:
        self.port = port
        self.timeout_s = timeout_s

    async def probe(
        self,
        verifier: VerifierSite,
        server_ip: IpAddress,
        *,
        samples_per_layer: int,
    ) -> list[ProbeSample]:
        samples: list[ProbeSample] = []

        def now_ms() -> float:
            return time.time() * 1000.0

        for _ in range(samples_per_layer):
            try:
                rtt = await tcp_handshake_rtt(server_ip, self.port, timeout_s=self.timeout_s)
            except (OSError, asyncio.TimeoutError) as exc:
                logger.warning("PROBE_TCP_FAILED: server=%s reason=%s", server_ip, type(exc).__name__)
                continue
            samples.append(ProbeSample(ProbeLayer.TCP_HANDSHAKE, rtt, verifier.verifier_id, now_ms()))

        try:
            rtts = await http_rtts(server_ip, samples_per_layer, self.port, timeout_s=self.timeout_s)
        except (ClientError, OSError, asyncio.TimeoutError) as exc:
            logger.warning("PROBE_HTTP_FAILED: server=%s reason=%s", server_ip, type(exc).__name__)
            rtts = []
        samples.extend(
            ProbeSample(ProbeLayer.HTTP_REQUEST_RESPONSE, rtt, verifier.verifier_id, now_ms()) for rtt in rtts
        )

        if not samples:
            raise ProbeFailedError(verifier.verifier_id, server_ip, "unreachable")
        return samples
