//! TCP transport for the aggregation fabric.
//!
//! Stream format: one persistent connection per (worker, shard). On
//! connect the worker sends its u32 id; afterwards both directions carry
//! length-prefixed frames: a u32 big-endian length, then an 8-byte
//! little-endian round index, then the wire frame from the codec layer.
//!
//! Shards run as server threads owning the same `ServerShardState` state
//! machine the in-process fabric uses, so outputs are bit-identical
//! across transports under equal seeds. Workers push every tensor before
//! pulling, and all parties order their socket work by worker id and
//! shard id, which keeps the round free of circular waits.

use super::{
    worker_prepare_push, AggregationConfig, RoundContext, RoundInput, RoundReport,
    ServerShardState, TensorId, TensorSpec, WorkerState,
};
use crate::compress::{decode_frame, decompress, encode_frame};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

const MAX_FRAME: u32 = 1 << 30;

fn write_framed(w: &mut impl Write, round: u64, frame: &[u8]) -> std::io::Result<()> {
    let len = (8 + frame.len()) as u32;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&round.to_le_bytes())?;
    w.write_all(frame)?;
    w.flush()
}

fn read_framed(r: &mut impl Read) -> Result<(u64, Vec<u8>)> {
    let mut len_buf = [0u8; 4];
    read_exact_timeout(r, &mut len_buf)?;
    let len = u32::from_be_bytes(len_buf);
    if len < 8 || len > MAX_FRAME {
        return Err(Error::MalformedPayload {
            offset: 0,
            reason: format!("frame length {len} out of range"),
        });
    }
    let mut body = vec![0u8; len as usize];
    read_exact_timeout(r, &mut body)?;
    let round = u64::from_le_bytes(body[..8].try_into().unwrap());
    body.drain(..8);
    Ok((round, body))
}

fn read_exact_timeout(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => {
            Error::Timeout("read deadline exceeded".into())
        }
        _ => Error::Io(e),
    })
}

/// One shard served over TCP. The acceptor waits for `n_workers`
/// connections, reader threads feed an aggregation loop, and completed
/// tensors are broadcast back to every worker in worker order.
pub struct TcpShardServer {
    addr: SocketAddr,
    state: Arc<Mutex<ServerShardState>>,
    handle: Option<JoinHandle<()>>,
}

impl TcpShardServer {
    pub fn spawn(
        cfg: AggregationConfig,
        shard_id: u32,
        seed: u64,
        bind: &str,
        timeout: Duration,
    ) -> Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Mutex::new(ServerShardState::new(shard_id)));
        let state_clone = Arc::clone(&state);
        let handle = std::thread::Builder::new()
            .name(format!("shard-{shard_id}"))
            .spawn(move || {
                if let Err(e) = serve(listener, cfg, seed, timeout, state_clone) {
                    log::debug!("shard {shard_id} server exited: {e}");
                }
            })?;
        Ok(Self { addr, state, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Post-round statistics (safe once all pulls of the round arrived).
    pub fn max_residual_norm(&self) -> f64 {
        self.state.lock().unwrap().max_residual_norm()
    }

    pub fn round_min_delta(&self) -> Option<f64> {
        self.state.lock().unwrap().round_min_delta()
    }

    pub fn reset_round_stats(&self) {
        self.state.lock().unwrap().reset_round_stats()
    }
}

impl Drop for TcpShardServer {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            // Workers have disconnected by now; the acceptor loop ends on
            // reader EOF.
            let _ = h.join();
        }
    }
}

fn serve(
    listener: TcpListener,
    cfg: AggregationConfig,
    seed: u64,
    timeout: Duration,
    state: Arc<Mutex<ServerShardState>>,
) -> Result<()> {
    let n = cfg.n_workers as usize;
    let mut writers: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();
    let (tx, rx) = mpsc::channel::<(u32, u64, TensorId, Vec<u8>)>();
    let mut readers = Vec::new();
    for _ in 0..n {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        let mut hello = [0u8; 4];
        let mut s = stream;
        read_exact_timeout(&mut s, &mut hello)?;
        let worker_id = u32::from_le_bytes(hello);
        if worker_id as usize >= n || writers[worker_id as usize].is_some() {
            return Err(Error::Config(format!("bad worker hello {worker_id}")));
        }
        let reader = s.try_clone()?;
        writers[worker_id as usize] = Some(s);
        let tx = tx.clone();
        readers.push(std::thread::spawn(move || {
            let mut reader = reader;
            loop {
                match read_framed(&mut reader) {
                    Ok((round, frame)) => {
                        let tensor = match decode_frame(&frame) {
                            Ok((tid, _)) => tid,
                            Err(e) => {
                                log::debug!("worker {worker_id} sent bad frame: {e}");
                                break;
                            }
                        };
                        if tx.send((worker_id, round, tensor, frame)).is_err() {
                            break;
                        }
                    }
                    Err(_) => break, // EOF or timeout: connection done
                }
            }
        }));
    }
    drop(tx);
    let mut writers: Vec<TcpStream> = writers.into_iter().map(|w| w.unwrap()).collect();

    while let Ok((worker_id, round, _tensor, frame)) = rx.recv() {
        let (tensor, msg) = decode_frame(&frame)?;
        let ctx = RoundContext { seed, iteration: round };
        let reply = {
            let mut shard = state.lock().unwrap();
            shard.ingest(&cfg, round, tensor, worker_id, msg, &ctx)?
        };
        if let Some(p) = reply {
            let bytes = encode_frame(&p, tensor);
            for w in writers.iter_mut() {
                write_framed(w, round, &bytes)?;
            }
        }
    }
    for r in readers {
        let _ = r.join();
    }
    Ok(())
}

/// Worker-side fabric over TCP. Owns the worker states and one
/// connection per (worker, shard); optionally hosts the shard servers
/// on loopback.
pub struct TcpCluster {
    cfg: AggregationConfig,
    assignment: std::collections::HashMap<TensorId, u32>,
    workers: Vec<WorkerState>,
    /// links[worker][shard]
    links: Vec<Vec<TcpStream>>,
    servers: Vec<TcpShardServer>,
}

impl TcpCluster {
    /// Spawn shard servers on loopback and connect every worker to every
    /// shard.
    pub fn spawn_local(
        cfg: AggregationConfig,
        specs: &[TensorSpec],
        seed: u64,
        timeout: Duration,
    ) -> Result<Self> {
        cfg.validate()?;
        let servers: Vec<TcpShardServer> = (0..cfg.shard_count)
            .map(|s| TcpShardServer::spawn(cfg, s, seed, "127.0.0.1:0", timeout))
            .collect::<Result<_>>()?;
        let addrs: Vec<SocketAddr> = servers.iter().map(|s| s.addr()).collect();
        Self::connect_with_servers(cfg, specs, &addrs, timeout, servers)
    }

    /// Connect to externally hosted shard servers.
    pub fn connect(
        cfg: AggregationConfig,
        specs: &[TensorSpec],
        addrs: &[SocketAddr],
        timeout: Duration,
    ) -> Result<Self> {
        cfg.validate()?;
        Self::connect_with_servers(cfg, specs, addrs, timeout, Vec::new())
    }

    fn connect_with_servers(
        cfg: AggregationConfig,
        specs: &[TensorSpec],
        addrs: &[SocketAddr],
        timeout: Duration,
        servers: Vec<TcpShardServer>,
    ) -> Result<Self> {
        if addrs.len() != cfg.shard_count as usize {
            return Err(Error::Config(format!(
                "{} shard addresses for shard_count {}",
                addrs.len(),
                cfg.shard_count
            )));
        }
        let assignment = super::plan_shards(&cfg, specs)?;
        let mut links = Vec::with_capacity(cfg.n_workers as usize);
        for worker in 0..cfg.n_workers {
            let mut per_shard = Vec::with_capacity(addrs.len());
            for addr in addrs {
                let mut stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                stream.set_read_timeout(Some(timeout))?;
                stream.write_all(&worker.to_le_bytes())?;
                per_shard.push(stream);
            }
            links.push(per_shard);
        }
        Ok(Self {
            cfg,
            assignment,
            workers: (0..cfg.n_workers).map(WorkerState::new).collect(),
            links,
            servers,
        })
    }

    pub fn config(&self) -> &AggregationConfig {
        &self.cfg
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    /// One bulk-synchronous round: all pushes, then all pulls, in fixed
    /// worker/shard order on every side.
    pub fn run_round(&mut self, input: &RoundInput, ctx: &RoundContext) -> Result<RoundReport> {
        use crate::compress::FRAME_HEADER_LEN;
        for server in &self.servers {
            server.reset_round_stats();
        }
        let mut push_bytes = 0u64;
        let mut max_abs_gradient = 0.0f64;
        let mut min_delta: Option<f64> = None;

        // Push phase.
        for (tensor, gradients) in &input.gradients {
            super::check_round_inputs(&self.cfg, gradients)?;
            let shard = *self
                .assignment
                .get(tensor)
                .ok_or_else(|| Error::Config(format!("tensor {tensor} not registered")))?;
            for (worker, gradient) in self.workers.iter_mut().zip(gradients) {
                max_abs_gradient = max_abs_gradient.max(gradient.linf_norm());
                let outcome = worker_prepare_push(&self.cfg, worker, *tensor, gradient, ctx)?;
                if let Some(d) = outcome.certified_delta {
                    min_delta = Some(min_delta.map_or(d, |m| m.min(d)));
                }
                let frame = encode_frame(&outcome.msg, *tensor);
                if worker.worker_id() == 0 {
                    push_bytes += (FRAME_HEADER_LEN + outcome.msg.payload.len()) as u64;
                }
                let link = &mut self.links[worker.worker_id() as usize][shard as usize];
                write_framed(link, ctx.iteration, &frame).map_err(Error::Io)?;
            }
        }

        // Pull phase: every worker drains every shard, lowest shard first.
        let mut per_shard_tensors: BTreeMap<u32, usize> = BTreeMap::new();
        for tensor in input.gradients.keys() {
            *per_shard_tensors.entry(self.assignment[tensor]).or_default() += 1;
        }
        let mut worker_frames: Vec<BTreeMap<TensorId, Vec<u8>>> =
            (0..self.cfg.n_workers).map(|_| BTreeMap::new()).collect();
        for (w, frames) in worker_frames.iter_mut().enumerate() {
            for (&shard, &count) in &per_shard_tensors {
                let link = &mut self.links[w][shard as usize];
                for _ in 0..count {
                    let (round, frame) = read_framed(link)?;
                    if round != ctx.iteration {
                        return Err(Error::MalformedPayload {
                            offset: 4,
                            reason: format!("round {round} != expected {}", ctx.iteration),
                        });
                    }
                    let (tensor, _) = decode_frame(&frame)?;
                    frames.insert(tensor, frame);
                }
            }
        }
        // Every worker must observe the same broadcast bytes.
        for (w, frames) in worker_frames.iter().enumerate().skip(1) {
            if *frames != worker_frames[0] {
                return Err(Error::Config(format!(
                    "worker {w} received a different broadcast than worker 0"
                )));
            }
        }

        let mut outputs = BTreeMap::new();
        let mut pull_bytes = 0u64;
        for (tensor, frame) in &worker_frames[0] {
            pull_bytes += frame.len() as u64;
            let (_, msg) = decode_frame(frame)?;
            outputs.insert(*tensor, decompress(&msg)?);
        }

        let mut max_server_residual = 0.0f64;
        for server in &self.servers {
            max_server_residual = max_server_residual.max(server.max_residual_norm());
            if let Some(d) = server.round_min_delta() {
                min_delta = Some(min_delta.map_or(d, |m| m.min(d)));
            }
        }
        Ok(RoundReport {
            outputs,
            push_bytes_per_worker: push_bytes,
            pull_bytes_per_worker: pull_bytes,
            max_worker_residual: self
                .workers
                .iter()
                .map(WorkerState::max_residual_norm)
                .fold(0.0, f64::max),
            max_server_residual,
            max_abs_gradient,
            min_certified_delta: min_delta,
        })
    }
}
