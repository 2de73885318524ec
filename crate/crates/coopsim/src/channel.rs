//! The communication layer: a bit-exact little-endian wire codec for
//! [`V2XPayload`], the transmission-cost model (BPS), bandwidth budgeting
//! with score-based retention, seeded corruption, and a latency queue.
//!
//! Wire layout (all little-endian):
//!
//! ```text
//! magic   "UVX1"                                                  4 B
//! header  sender u32, timestamp f64, pose 12 x f64 (R row-major, T)
//! AGT     count u32; per query:
//!         track_id i32, class u8, conf f32, ref_point 3xf32,
//!         heading f32, velocity 2xf32, flow_ref 2xf32, box 3xf32,
//!         feature Dxf32, flow_feature Dxf32
//! LAN     count u32; per query:
//!         class u8, conf f32, n_pts u16, points 2xf32 each, feature Dxf32
//! OCC     present u8;
//!         1 (dense):  W u16, H u16, res f32, x_min f32, y_min f32,
//!                     p0 W*H x f32, p1 W*H x f32
//!         2 (sparse): W u16, H u16, res f32, x_min f32, y_min f32,
//!                     count u32, (cell u32, p0 f32, p1 f32) x count
//! ```
//!
//! The feature dimension `D` is out-of-band configuration shared by both
//! ends ([`WireCodec::new`]).

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{
    AgentClass, AgentQuery, Grid, GridSpec, LaneClass, LaneQuery, OccupancyMessage, Pose,
};
use crate::infra::{OccupancyTransport, PayloadHeader, V2XPayload};
use crate::scenario::{substream, STREAM_CHANNEL};

pub const MAGIC: &[u8; 4] = b"UVX1";

/// Encoded size of an empty payload: magic + header + two zero counts + an
/// absent-occupancy flag.
pub const EMPTY_PAYLOAD_BYTES: usize = 4 + (4 + 8 + 96) + 4 + 4 + 1;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic; not a UVX1 payload")]
    BadMagic,
    #[error("truncated stream at byte {offset}")]
    Truncated { offset: usize },
    #[error("structure error: {0}")]
    Structure(String),
}

/// Simulated link configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    /// One-way delivery delay, seconds.
    pub latency: f64,
    /// Per-payload byte budget; `None` means unlimited.
    pub bandwidth_budget: Option<u64>,
    /// Fraction of agent queries randomly discarded per transmission.
    pub drop_fraction: f64,
    /// Transmissions per second, used for BPS accounting.
    pub frequency_hz: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            latency: 0.0,
            bandwidth_budget: None,
            drop_fraction: 0.0,
            frequency_hz: 2.0,
            seed: 0,
        }
    }
}

/// Component-wise transmission cost of one payload body. The magic, header,
/// and section framing counts are excluded (calibration and timestamps are
/// not billed); per-item geometry fields are.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub feature_bytes: u64,
    pub geometry_bytes: u64,
    pub occupancy_bytes: u64,
    pub total_body_bytes: u64,
    pub bps: f64,
}

impl CostReport {
    pub fn zero() -> Self {
        CostReport {
            feature_bytes: 0,
            geometry_bytes: 0,
            occupancy_bytes: 0,
            total_body_bytes: 0,
            bps: 0.0,
        }
    }
}

/// Billed bytes for one agent query: geometry (53) plus two feature blocks.
pub fn agent_query_cost(feature_dim: usize) -> u64 {
    53 + 8 * feature_dim as u64
}

/// Billed bytes for one lane query: geometry (7 + 8 per point) plus one
/// feature block.
pub fn lane_query_cost(feature_dim: usize, n_points: usize) -> u64 {
    7 + 8 * n_points as u64 + 4 * feature_dim as u64
}

/// Billed bytes for a dense occupancy message: 2*W*H floats plus framing.
pub fn dense_occupancy_cost(spec: &GridSpec) -> u64 {
    8 * spec.cells() as u64 + 13
}

/// Billed bytes for a sparse occupancy cell list.
pub fn sparse_occupancy_cost(n_cells: usize) -> u64 {
    12 * n_cells as u64 + 13
}

/// Cost of transmitting a dense float tensor of the given shape.
pub fn dense_feature_cost(dims: &[usize]) -> u64 {
    4 * dims.iter().product::<usize>() as u64
}

/// Component-wise cost of a payload at a transmission frequency.
pub fn cost(payload: &V2XPayload, frequency_hz: f64) -> CostReport {
    let mut feature_bytes = 0u64;
    let mut geometry_bytes = 0u64;
    for q in &payload.agent_queries {
        feature_bytes += 8 * q.feature.len() as u64;
        geometry_bytes += 53;
    }
    for l in &payload.lane_queries {
        feature_bytes += 4 * l.feature.len() as u64;
        geometry_bytes += 7 + 8 * l.points.len() as u64;
    }
    let occupancy_bytes = match &payload.occupancy {
        None => 0,
        Some(OccupancyTransport::Dense(m)) => dense_occupancy_cost(&m.grid()),
        Some(OccupancyTransport::Sparse { cells, .. }) => sparse_occupancy_cost(cells.len()),
    };
    let total_body_bytes = feature_bytes + geometry_bytes + occupancy_bytes;
    CostReport {
        feature_bytes,
        geometry_bytes,
        occupancy_bytes,
        total_body_bytes,
        bps: total_body_bytes as f64 * frequency_hz,
    }
}

/// Bit-exact wire codec. `feature_dim` is shared configuration; every query
/// on the wire carries exactly this many feature floats.
#[derive(Debug, Clone, Copy)]
pub struct WireCodec {
    pub feature_dim: usize,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::Truncated { offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32, CodecError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl WireCodec {
    pub fn new(feature_dim: usize) -> Self {
        WireCodec { feature_dim }
    }

    pub fn encode(&self, payload: &V2XPayload) -> Vec<u8> {
        let d = self.feature_dim;
        let mut w = Writer::new();
        w.buf.extend_from_slice(MAGIC);
        w.u32(payload.header.sender_id);
        w.f64(payload.header.timestamp);
        for row in &payload.header.world_from_sensor.rotation {
            for v in row {
                w.f64(*v);
            }
        }
        for v in &payload.header.world_from_sensor.translation {
            w.f64(*v);
        }

        w.u32(payload.agent_queries.len() as u32);
        for q in &payload.agent_queries {
            assert_eq!(q.feature.len(), d, "agent feature dim mismatch");
            w.i32(q.track_id);
            w.u8(q.class.to_u8());
            w.f32(q.confidence as f32);
            for v in q.ref_point {
                w.f32(v as f32);
            }
            w.f32(q.heading as f32);
            for v in q.velocity {
                w.f32(v as f32);
            }
            for v in q.flow_ref {
                w.f32(v as f32);
            }
            for v in q.box_size {
                w.f32(v as f32);
            }
            for v in &q.feature {
                w.f32(*v as f32);
            }
            for v in &q.flow_feature {
                w.f32(*v as f32);
            }
        }

        w.u32(payload.lane_queries.len() as u32);
        for l in &payload.lane_queries {
            assert_eq!(l.feature.len(), d, "lane feature dim mismatch");
            w.u8(l.class.to_u8());
            w.f32(l.confidence as f32);
            w.u16(l.points.len() as u16);
            for p in &l.points {
                w.f32(p[0] as f32);
                w.f32(p[1] as f32);
            }
            for v in &l.feature {
                w.f32(*v as f32);
            }
        }

        match &payload.occupancy {
            None => w.u8(0),
            Some(OccupancyTransport::Dense(m)) => {
                w.u8(1);
                let spec = m.grid();
                w.u16(spec.width as u16);
                w.u16(spec.height as u16);
                w.f32(spec.resolution as f32);
                w.f32(spec.x_min as f32);
                w.f32(spec.y_min as f32);
                for v in &m.p0.data {
                    w.f32(*v);
                }
                for v in &m.p1.data {
                    w.f32(*v);
                }
            }
            Some(OccupancyTransport::Sparse { grid, cells, .. }) => {
                w.u8(2);
                w.u16(grid.width as u16);
                w.u16(grid.height as u16);
                w.f32(grid.resolution as f32);
                w.f32(grid.x_min as f32);
                w.f32(grid.y_min as f32);
                w.u32(cells.len() as u32);
                for &(idx, p0, p1) in cells {
                    w.u32(idx);
                    w.f32(p0);
                    w.f32(p1);
                }
            }
        }
        w.buf
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<V2XPayload, CodecError> {
        let d = self.feature_dim;
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(CodecError::BadMagic);
        }
        let sender_id = r.u32()?;
        let timestamp = r.f64()?;
        let mut rotation = [[0.0f64; 3]; 3];
        for row in &mut rotation {
            for v in row.iter_mut() {
                *v = r.f64()?;
            }
        }
        let mut translation = [0.0f64; 3];
        for v in &mut translation {
            *v = r.f64()?;
        }
        let header = PayloadHeader {
            sender_id,
            timestamp,
            world_from_sensor: Pose {
                rotation,
                translation,
            },
        };

        let n_agents = r.u32()? as usize;
        let mut agent_queries = Vec::with_capacity(n_agents.min(1 << 20));
        for _ in 0..n_agents {
            let track_id = r.i32()?;
            let class = AgentClass::from_u8(r.u8()?)
                .ok_or_else(|| CodecError::Structure("unknown agent class".into()))?;
            let confidence = r.f32()? as f64;
            let ref_point = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
            let heading = r.f32()? as f64;
            let velocity = [r.f32()? as f64, r.f32()? as f64];
            let flow_ref = [r.f32()? as f64, r.f32()? as f64];
            let box_size = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
            let mut feature = Vec::with_capacity(d);
            for _ in 0..d {
                feature.push(r.f32()? as f64);
            }
            let mut flow_feature = Vec::with_capacity(d);
            for _ in 0..d {
                flow_feature.push(r.f32()? as f64);
            }
            agent_queries.push(AgentQuery {
                feature,
                ref_point,
                heading,
                velocity,
                flow_ref,
                flow_feature,
                track_id,
                confidence,
                box_size,
                class,
                timestamp,
            });
        }

        let n_lanes = r.u32()? as usize;
        let mut lane_queries = Vec::with_capacity(n_lanes.min(1 << 20));
        for _ in 0..n_lanes {
            let class = LaneClass::from_u8(r.u8()?)
                .ok_or_else(|| CodecError::Structure("unknown lane class".into()))?;
            let confidence = r.f32()? as f64;
            let n_pts = r.u16()? as usize;
            if n_pts < 2 {
                return Err(CodecError::Structure(
                    "lane polyline needs >= 2 points".into(),
                ));
            }
            let mut points = Vec::with_capacity(n_pts);
            for _ in 0..n_pts {
                points.push([r.f32()? as f64, r.f32()? as f64]);
            }
            let mut feature = Vec::with_capacity(d);
            for _ in 0..d {
                feature.push(r.f32()? as f64);
            }
            lane_queries.push(LaneQuery {
                feature,
                points,
                class,
                confidence,
            });
        }

        let present = r.u8()?;
        let occupancy = match present {
            0 => None,
            1 | 2 => {
                let width = r.u16()? as usize;
                let height = r.u16()? as usize;
                let resolution = r.f32()? as f64;
                let x_min = r.f32()? as f64;
                let y_min = r.f32()? as f64;
                let spec = GridSpec::new(width, height, resolution, x_min, y_min)
                    .map_err(|e| CodecError::Structure(e.to_string()))?;
                if present == 1 {
                    let cells = spec.cells();
                    let mut p0 = Grid::filled(spec, 0.0f32);
                    for v in p0.data.iter_mut() {
                        *v = r.f32()?;
                    }
                    let mut p1 = Grid::filled(spec, 0.0f32);
                    for v in p1.data.iter_mut() {
                        *v = r.f32()?;
                    }
                    debug_assert_eq!(p0.data.len(), cells);
                    Some(OccupancyTransport::Dense(OccupancyMessage {
                        p0,
                        p1,
                        timestamp,
                    }))
                } else {
                    let count = r.u32()? as usize;
                    if count > spec.cells() {
                        return Err(CodecError::Structure(
                            "sparse cell count exceeds grid size".into(),
                        ));
                    }
                    let mut cells = Vec::with_capacity(count);
                    for _ in 0..count {
                        let idx = r.u32()?;
                        if idx as usize >= spec.cells() {
                            return Err(CodecError::Structure(
                                "sparse cell index out of range".into(),
                            ));
                        }
                        cells.push((idx, r.f32()?, r.f32()?));
                    }
                    Some(OccupancyTransport::Sparse {
                        grid: spec,
                        timestamp,
                        cells,
                    })
                }
            }
            other => {
                return Err(CodecError::Structure(format!(
                    "unknown occupancy flag {other}"
                )))
            }
        };

        if r.pos != bytes.len() {
            return Err(CodecError::Structure(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        Ok(V2XPayload {
            header,
            agent_queries,
            lane_queries,
            occupancy,
        })
    }
}

/// Greedy prefix retention under a byte budget: agent queries by descending
/// confidence, then lane queries by descending confidence, then occupancy.
/// Retention stops at the first item that does not fit, which gives the
/// prefix property (smaller budgets retain subsets). A dense occupancy that
/// does not fit degrades to a sparse cell list ranked by descending p0 (ties
/// by ascending cell index); zero-probability cells are never shipped since
/// omission reconstructs them exactly.
pub fn fit_to_budget(payload: &V2XPayload, budget_bytes: u64) -> V2XPayload {
    let full = cost(payload, 1.0); // frequency-independent byte total
    if full.total_body_bytes <= budget_bytes {
        return payload.clone();
    }

    let mut out = V2XPayload::empty(payload.header.clone());
    let mut remaining = budget_bytes;
    let mut stopped = false;

    let mut agent_order: Vec<usize> = (0..payload.agent_queries.len()).collect();
    agent_order.sort_by(|&a, &b| {
        payload.agent_queries[b]
            .confidence
            .partial_cmp(&payload.agent_queries[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut retained_agents = vec![false; payload.agent_queries.len()];
    for &i in &agent_order {
        let c = agent_query_cost(payload.agent_queries[i].feature.len());
        if c <= remaining {
            remaining -= c;
            retained_agents[i] = true;
        } else {
            stopped = true;
            break;
        }
    }
    out.agent_queries = payload
        .agent_queries
        .iter()
        .enumerate()
        .filter(|(i, _)| retained_agents[*i])
        .map(|(_, q)| q.clone())
        .collect();

    if !stopped {
        let mut lane_order: Vec<usize> = (0..payload.lane_queries.len()).collect();
        lane_order.sort_by(|&a, &b| {
            payload.lane_queries[b]
                .confidence
                .partial_cmp(&payload.lane_queries[a].confidence)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut retained_lanes = vec![false; payload.lane_queries.len()];
        for &i in &lane_order {
            let l = &payload.lane_queries[i];
            let c = lane_query_cost(l.feature.len(), l.points.len());
            if c <= remaining {
                remaining -= c;
                retained_lanes[i] = true;
            } else {
                stopped = true;
                break;
            }
        }
        out.lane_queries = payload
            .lane_queries
            .iter()
            .enumerate()
            .filter(|(i, _)| retained_lanes[*i])
            .map(|(_, q)| q.clone())
            .collect();
    }

    if !stopped {
        if let Some(occ) = &payload.occupancy {
            out.occupancy = degrade_occupancy(occ, remaining);
        }
    }
    out
}

fn degrade_occupancy(occ: &OccupancyTransport, remaining: u64) -> Option<OccupancyTransport> {
    if let OccupancyTransport::Dense(m) = occ {
        if dense_occupancy_cost(&m.grid()) <= remaining {
            return Some(occ.clone());
        }
    }
    // Rank candidate cells by descending p0, ties by ascending index.
    let mut ranked: Vec<(u32, f32, f32)> = match occ {
        OccupancyTransport::Dense(m) => {
            m.p0.data
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0.0)
                .map(|(i, v)| (i as u32, *v, m.p1.data[i]))
                .collect()
        }
        OccupancyTransport::Sparse { cells, .. } => cells
            .iter()
            .filter(|(_, p0, _)| *p0 > 0.0)
            .copied()
            .collect(),
    };
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    if remaining < 13 + 12 {
        return None;
    }
    let max_cells = ((remaining - 13) / 12) as usize;
    ranked.truncate(max_cells);
    if ranked.is_empty() {
        return None;
    }
    Some(OccupancyTransport::Sparse {
        grid: occ.grid(),
        timestamp: occ.timestamp(),
        cells: ranked,
    })
}

/// Removes a uniformly random `floor(drop_fraction * N)`-subset of the agent
/// queries; lanes and occupancy are untouched. The dropped subsets are nested
/// across fractions for a fixed rng state: the same shuffled order is
/// truncated at different depths.
pub fn corrupt(
    payload: &V2XPayload,
    drop_fraction: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> V2XPayload {
    assert!((0.0..=1.0).contains(&drop_fraction));
    let n = payload.agent_queries.len();
    let k = (drop_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut dropped = vec![false; n];
    for &i in order.iter().take(k) {
        dropped[i] = true;
    }
    let mut out = payload.clone();
    out.agent_queries = payload
        .agent_queries
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped[*i])
        .map(|(_, q)| q.clone())
        .collect();
    out
}

/// Simulated link: payloads submitted at a send time are delivered, in order,
/// once `now >= send_time + latency`. The budget/corruption pipeline runs at
/// submit; the payload then crosses the wire in encoded form.
pub struct Channel {
    pub config: ChannelConfig,
    codec: WireCodec,
    queue: VecDeque<(f64, Vec<u8>)>,
    submits: u64,
    last_send: Option<f64>,
}

impl Channel {
    pub fn new(config: ChannelConfig, feature_dim: usize) -> Self {
        Channel {
            config,
            codec: WireCodec::new(feature_dim),
            queue: VecDeque::new(),
            submits: 0,
            last_send: None,
        }
    }

    /// Applies fit_to_budget then corrupt, queues the encoded payload for
    /// delivery, and reports the transmitted cost.
    pub fn submit(&mut self, payload: &V2XPayload, send_time: f64) -> CostReport {
        if let Some(last) = self.last_send {
            debug_assert!(send_time >= last, "send times must be non-decreasing");
        }
        self.last_send = Some(send_time);
        let fitted = match self.config.bandwidth_budget {
            Some(b) => fit_to_budget(payload, b),
            None => payload.clone(),
        };
        let mut rng = substream(self.config.seed, &[STREAM_CHANNEL, self.submits]);
        self.submits += 1;
        let sent = corrupt(&fitted, self.config.drop_fraction, &mut rng);
        let report = cost(&sent, self.config.frequency_hz);
        let bytes = self.codec.encode(&sent);
        self.queue
            .push_back((send_time + self.config.latency, bytes));
        report
    }

    /// Everything whose delivery time has arrived, in send order.
    pub fn poll(&mut self, now: f64) -> Vec<V2XPayload> {
        let mut out = Vec::new();
        while let Some((ready, _)) = self.queue.front() {
            if *ready <= now {
                let (_, bytes) = self.queue.pop_front().unwrap();
                out.push(
                    self.codec
                        .decode(&bytes)
                        .expect("self-encoded payload decodes"),
                );
            } else {
                break;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        substream(seed, &[99])
    }

    /// Random payload with f32-representable values so the f32 wire is
    /// lossless.
    fn random_payload(rng: &mut ChaCha8Rng, d: usize) -> V2XPayload {
        let f32v = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| -> f64 { rng.gen_range(lo..hi) as f64 };
        let header = PayloadHeader {
            sender_id: rng.gen(),
            timestamp: rng.gen_range(0.0..100.0),
            world_from_sensor: Pose::from_yaw(
                rng.gen_range(-3.0..3.0),
                [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), 0.0],
            ),
        };
        let n_agents = rng.gen_range(0..5);
        let agent_queries = (0..n_agents)
            .map(|_i| AgentQuery {
                feature: (0..d).map(|_| f32v(rng, -1.0, 1.0)).collect(),
                ref_point: [f32v(rng, -50.0, 50.0), f32v(rng, -50.0, 50.0), 0.0],
                heading: f32v(rng, -3.0, 3.0),
                velocity: [f32v(rng, -10.0, 10.0), f32v(rng, -10.0, 10.0)],
                flow_ref: [f32v(rng, -10.0, 10.0), f32v(rng, -10.0, 10.0)],
                flow_feature: (0..d).map(|_| f32v(rng, -1.0, 1.0)).collect(),
                track_id: rng.gen_range(-1000..1000),
                confidence: f32v(rng, 0.0, 1.0),
                box_size: [
                    f32v(rng, 0.5, 5.0),
                    f32v(rng, 0.5, 2.0),
                    f32v(rng, 0.5, 2.0),
                ],
                class: AgentClass::from_u8(rng.gen_range(0..4)).unwrap(),
                timestamp: header.timestamp,
            })
            .collect();
        let n_lanes = rng.gen_range(0..4);
        let lane_queries = (0..n_lanes)
            .map(|_| {
                let n_pts = rng.gen_range(2..6);
                LaneQuery {
                    feature: (0..d).map(|_| f32v(rng, -1.0, 1.0)).collect(),
                    points: (0..n_pts)
                        .map(|_| [f32v(rng, -50.0, 50.0), f32v(rng, -50.0, 50.0)])
                        .collect(),
                    class: LaneClass::from_u8(rng.gen_range(0..2)).unwrap(),
                    confidence: f32v(rng, 0.0, 1.0),
                }
            })
            .collect();
        let occupancy = match rng.gen_range(0..3) {
            0 => None,
            1 => {
                let spec = GridSpec::new(rng.gen_range(2..8), rng.gen_range(2..8), 0.5, -2.0, -2.0)
                    .unwrap();
                let mut m = OccupancyMessage::zeros(spec, header.timestamp);
                for v in m.p0.data.iter_mut() {
                    *v = rng.gen_range(0.0..1.0);
                }
                for v in m.p1.data.iter_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
                Some(OccupancyTransport::Dense(m))
            }
            _ => {
                let spec = GridSpec::new(6, 6, 0.5, 0.0, 0.0).unwrap();
                let n = rng.gen_range(0..10);
                let cells = (0..n)
                    .map(|_| {
                        (
                            rng.gen_range(0..36u32),
                            rng.gen_range(0.0..1.0f32),
                            rng.gen_range(-0.5..0.5f32),
                        )
                    })
                    .collect();
                Some(OccupancyTransport::Sparse {
                    grid: spec,
                    timestamp: header.timestamp,
                    cells,
                })
            }
        };
        V2XPayload {
            header,
            agent_queries,
            lane_queries,
            occupancy,
        }
    }

    fn empty_payload() -> V2XPayload {
        V2XPayload::empty(PayloadHeader {
            sender_id: 0,
            timestamp: 0.0,
            world_from_sensor: Pose::identity(),
        })
    }

    #[test]
    fn empty_payload_length_matches_layout() {
        let codec = WireCodec::new(256);
        let bytes = codec.encode(&empty_payload());
        assert_eq!(bytes.len(), EMPTY_PAYLOAD_BYTES);
        assert_eq!(bytes.len(), 121);
    }

    #[test]
    fn roundtrip_identity_over_random_payloads() {
        let mut r = rng(1234);
        for case in 0..1000 {
            let d = [4usize, 8, 16][case % 3];
            let codec = WireCodec::new(d);
            let p = random_payload(&mut r, d);
            let bytes = codec.encode(&p);
            let back = codec.decode(&bytes).unwrap();
            assert_eq!(p, back, "case {case}");
        }
    }

    #[test]
    fn decode_error_paths() {
        let codec = WireCodec::new(8);
        let mut r = rng(7);
        let p = random_payload(&mut r, 8);
        let mut bytes = codec.encode(&p);

        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xFF;
        assert!(matches!(
            codec.decode(&bad_magic),
            Err(CodecError::BadMagic)
        ));

        bytes.truncate(bytes.len() / 2);
        match codec.decode(&bytes) {
            Err(CodecError::Truncated { offset }) => assert!(offset <= bytes.len()),
            other => panic!("expected truncation, got {other:?}"),
        }

        // Occupancy flag 9 is structural nonsense.
        let mut flag = codec.encode(&empty_payload());
        let last = flag.len() - 1;
        flag[last] = 9;
        assert!(matches!(codec.decode(&flag), Err(CodecError::Structure(_))));
    }

    #[test]
    fn cost_matches_reference_arithmetic() {
        // Dense (24,36,36) float tensor.
        assert_eq!(dense_feature_cost(&[24, 36, 36]), 124_416);
        assert_eq!(dense_feature_cost(&[24, 36, 36]) as f64 * 2.0, 248_832.0);

        // One D=256 feature block is 1024 bytes: a lane query carries exactly
        // one block, an agent query two.
        let mut p = empty_payload();
        p.lane_queries.push(LaneQuery {
            feature: vec![0.0; 256],
            points: vec![[0.0, 0.0], [1.0, 0.0]],
            class: LaneClass::Lane,
            confidence: 1.0,
        });
        let c = cost(&p, 2.0);
        assert_eq!(c.feature_bytes, 1024);

        // Ten queries, features only: 10 x 2 x 1024 with flow features, but the
        // paper's per-query block is 1024 B; check both accountings.
        let mut ten = empty_payload();
        for i in 0..10 {
            ten.agent_queries.push(AgentQuery {
                feature: vec![0.0; 256],
                ref_point: [0.0; 3],
                heading: 0.0,
                velocity: [0.0; 2],
                flow_ref: [0.0; 2],
                flow_feature: vec![0.0; 256],
                track_id: i,
                confidence: 1.0,
                box_size: [1.0; 3],
                class: AgentClass::Car,
                timestamp: 0.0,
            });
        }
        let c = cost(&ten, 2.0);
        assert_eq!(c.feature_bytes, 10 * 2 * 1024);
        assert_eq!(c.geometry_bytes, 10 * 53);

        let c0 = cost(&empty_payload(), 2.0);
        assert_eq!(c0.total_body_bytes, 0);
        assert_eq!(c0.bps, 0.0);
    }

    #[test]
    fn budget_prefix_retention() {
        let mut p = empty_payload();
        // Three queries costing agent_query_cost(128) = 53 + 1024 = 1077 each.
        for (i, conf) in [(0, 0.9), (1, 0.5), (2, 0.7)] {
            p.agent_queries.push(AgentQuery {
                feature: vec![0.0; 128],
                ref_point: [0.0; 3],
                heading: 0.0,
                velocity: [0.0; 2],
                flow_ref: [0.0; 2],
                flow_feature: vec![0.0; 128],
                track_id: i,
                confidence: conf,
                box_size: [1.0; 3],
                class: AgentClass::Car,
                timestamp: 0.0,
            });
        }
        let per = agent_query_cost(128);
        let two = fit_to_budget(&p, 2 * per + 10);
        assert_eq!(
            two.agent_queries
                .iter()
                .map(|q| q.track_id)
                .collect::<Vec<_>>(),
            vec![0, 2],
            "two highest-confidence retained, original order"
        );

        assert_eq!(fit_to_budget(&p, 0).agent_queries.len(), 0);
        let full = fit_to_budget(&p, 100_000);
        assert_eq!(full, p);
    }

    #[test]
    fn budget_cost_and_monotonicity_properties() {
        let mut r = rng(5150);
        for _ in 0..50 {
            let p = random_payload(&mut r, 8);
            let full = cost(&p, 1.0).total_body_bytes;
            let budgets = [0, full / 7, full / 3, full / 2, full, full + 100];
            let mut prev_sets: Option<(Vec<i32>, Vec<usize>, usize)> = None;
            for b in budgets {
                let fitted = fit_to_budget(&p, b);
                let c = cost(&fitted, 1.0);
                assert!(c.total_body_bytes <= b, "cost exceeds budget");
                assert!(c.total_body_bytes <= full);
                let ids: Vec<i32> = fitted.agent_queries.iter().map(|q| q.track_id).collect();
                let lane_ids: Vec<usize> = fitted
                    .lane_queries
                    .iter()
                    .map(|l| p.lane_queries.iter().position(|o| o == l).unwrap())
                    .collect();
                let occ_cells = match &fitted.occupancy {
                    None => 0,
                    Some(OccupancyTransport::Sparse { cells, .. }) => cells.len(),
                    Some(OccupancyTransport::Dense(m)) => m.grid().cells(),
                };
                if let Some((prev_ids, prev_lanes, prev_occ)) = &prev_sets {
                    assert!(
                        prev_ids.iter().all(|id| ids.contains(id)),
                        "retained agents must be nested across budgets"
                    );
                    assert!(
                        prev_lanes.iter().all(|id| lane_ids.contains(id)),
                        "retained lanes must be nested across budgets"
                    );
                    assert!(*prev_occ <= occ_cells, "occupancy retention must be nested");
                }
                prev_sets = Some((ids, lane_ids, occ_cells));
            }
        }
    }

    #[test]
    fn occupancy_degrades_to_ranked_sparse_cells() {
        let spec = GridSpec::new(4, 4, 0.5, 0.0, 0.0).unwrap();
        let mut m = OccupancyMessage::zeros(spec, 0.0);
        m.p0.data[3] = 0.9;
        m.p0.data[7] = 0.9;
        m.p0.data[1] = 0.4;
        m.p1.data[3] = -0.1;
        let mut p = empty_payload();
        p.occupancy = Some(OccupancyTransport::Dense(m));
        // Room for exactly two cells: 13 + 24.
        let fitted = fit_to_budget(&p, 13 + 24);
        match fitted.occupancy.unwrap() {
            OccupancyTransport::Sparse { cells, .. } => {
                assert_eq!(cells.len(), 2);
                assert_eq!(cells[0].0, 3, "ties broken by ascending index");
                assert_eq!(cells[1].0, 7);
                assert_eq!(cells[0].2, -0.1f32);
            }
            _ => panic!("expected sparse degradation"),
        }
    }

    #[test]
    fn corrupt_cases() {
        let mut p = empty_payload();
        for i in 0..10 {
            p.agent_queries.push(AgentQuery {
                feature: vec![0.0; 4],
                ref_point: [i as f64, 0.0, 0.0],
                heading: 0.0,
                velocity: [0.0; 2],
                flow_ref: [0.0; 2],
                flow_feature: vec![0.0; 4],
                track_id: i,
                confidence: 0.9,
                box_size: [1.0; 3],
                class: AgentClass::Car,
                timestamp: 0.0,
            });
        }
        let mut r1 = rng(77);
        let same = corrupt(&p, 0.0, &mut r1);
        assert_eq!(same, p);

        let mut r1 = rng(77);
        let none = corrupt(&p, 1.0, &mut r1);
        assert!(none.agent_queries.is_empty());

        let mut r1 = rng(77);
        let a = corrupt(&p, 0.3, &mut r1);
        assert_eq!(a.agent_queries.len(), 7);
        let mut r2 = rng(77);
        let b = corrupt(&p, 0.3, &mut r2);
        assert_eq!(a, b, "same seed, same survivors");

        // Nested drops: survivors at a higher fraction are a subset.
        let mut r3 = rng(77);
        let c = corrupt(&p, 0.7, &mut r3);
        let ids_a: Vec<i32> = a.agent_queries.iter().map(|q| q.track_id).collect();
        for q in &c.agent_queries {
            assert!(ids_a.contains(&q.track_id));
        }
    }

    #[test]
    fn channel_latency_and_order() {
        let mut ch = Channel::new(
            ChannelConfig {
                latency: 0.0,
                ..Default::default()
            },
            8,
        );
        let p = empty_payload();
        ch.submit(&p, 1.0);
        assert_eq!(ch.poll(1.0).len(), 1);

        let mut ch = Channel::new(
            ChannelConfig {
                latency: 0.5,
                ..Default::default()
            },
            8,
        );
        ch.submit(&p, 1.0);
        assert!(ch.poll(1.4).is_empty());
        assert_eq!(ch.poll(1.5).len(), 1);

        let mut ch = Channel::new(ChannelConfig::default(), 8);
        let mut p1 = empty_payload();
        p1.header.sender_id = 1;
        let mut p2 = empty_payload();
        p2.header.sender_id = 2;
        ch.submit(&p1, 1.0);
        ch.submit(&p2, 1.5);
        let got = ch.poll(2.0);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].header.sender_id, 1);
        assert_eq!(got[1].header.sender_id, 2);
    }

    #[test]
    fn hybrid_payload_beats_dense_feature_map_by_50x() {
        // Worst-case defaults: 20 agents, 10 lanes (each 30 points), dense
        // 200x200 occupancy, D = 256.
        let agents = 20 * agent_query_cost(256);
        let lanes = 10 * lane_query_cost(256, 30);
        let occ = dense_occupancy_cost(&GridSpec::ego_default());
        let hybrid = agents + lanes + occ;
        let dense = dense_feature_cost(&[200, 200, 256]);
        assert!(hybrid * 50 < dense, "hybrid {hybrid} vs dense {dense}");
    }
}
