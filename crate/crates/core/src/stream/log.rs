//! Append-only segmented log for one topic partition.
//!
//! Each record is the canonical JSON encoding of an envelope followed by a
//! newline, so a segment file is a plain JSON-lines dump. Offsets are implicit:
//! the n-th line of a segment has offset `base_offset + n`. A sparse block index
//! (one entry per [`BLOCK_RECORDS`] records) keeps per-block timestamp bounds so
//! range queries only decode blocks that can intersect the requested range.
//! Timestamps need not be monotone; bounds are min/max per block.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::envelope::{SampleEnvelope, TimestampNs};
use super::StreamError;

pub const BLOCK_RECORDS: u64 = 64;

#[derive(Debug, Clone, Copy)]
struct BlockIndex {
    first_offset: u64,
    byte_pos: u64,
    min_ts: TimestampNs,
    max_ts: TimestampNs,
}

enum SegmentData {
    Memory(Vec<u8>),
    File {
        path: PathBuf,
        writer: BufWriter<File>,
        dirty: bool,
    },
}

struct Segment {
    base_offset: u64,
    records: u64,
    size_bytes: u64,
    min_ts: TimestampNs,
    max_ts: TimestampNs,
    blocks: Vec<BlockIndex>,
    data: SegmentData,
}

impl Segment {
    fn new(base_offset: u64, dir: Option<&Path>) -> Result<Self, StreamError> {
        let data = match dir {
            None => SegmentData::Memory(Vec::new()),
            Some(dir) => {
                let path = dir.join(segment_file_name(base_offset));
                let file = OpenOptions::new().create(true).append(true).open(&path)?;
                SegmentData::File {
                    path,
                    writer: BufWriter::with_capacity(1 << 16, file),
                    dirty: false,
                }
            }
        };
        Ok(Self {
            base_offset,
            records: 0,
            size_bytes: 0,
            min_ts: TimestampNs::MAX,
            max_ts: TimestampNs::MIN,
            blocks: Vec::new(),
            data,
        })
    }

    fn note_record(&mut self, ts: TimestampNs, len: u64) {
        if self.records % BLOCK_RECORDS == 0 {
            self.blocks.push(BlockIndex {
                first_offset: self.base_offset + self.records,
                byte_pos: self.size_bytes,
                min_ts: ts,
                max_ts: ts,
            });
        } else {
            let block = self.blocks.last_mut().expect("open block");
            block.min_ts = block.min_ts.min(ts);
            block.max_ts = block.max_ts.max(ts);
        }
        self.min_ts = self.min_ts.min(ts);
        self.max_ts = self.max_ts.max(ts);
        self.records += 1;
        self.size_bytes += len;
    }

    fn append(&mut self, line: &[u8], ts: TimestampNs) -> Result<(), StreamError> {
        match &mut self.data {
            SegmentData::Memory(buf) => buf.extend_from_slice(line),
            SegmentData::File { writer, dirty, .. } => {
                writer.write_all(line)?;
                *dirty = true;
            }
        }
        self.note_record(ts, line.len() as u64);
        Ok(())
    }

    fn flush(&mut self) -> Result<(), StreamError> {
        if let SegmentData::File { writer, dirty, .. } = &mut self.data {
            if *dirty {
                writer.flush()?;
                *dirty = false;
            }
        }
        Ok(())
    }

    fn read_bytes(&mut self, start: u64, end: u64) -> Result<Vec<u8>, StreamError> {
        self.flush()?;
        match &self.data {
            SegmentData::Memory(buf) => Ok(buf[start as usize..end as usize].to_vec()),
            SegmentData::File { path, .. } => {
                let mut file = File::open(path)?;
                file.seek(SeekFrom::Start(start))?;
                let mut out = vec![0u8; (end - start) as usize];
                file.read_exact(&mut out)?;
                Ok(out)
            }
        }
    }

    fn block_end(&self, i: usize) -> u64 {
        self.blocks
            .get(i + 1)
            .map(|b| b.byte_pos)
            .unwrap_or(self.size_bytes)
    }

    fn remove(self) -> Result<(), StreamError> {
        if let SegmentData::File { path, writer, .. } = self.data {
            drop(writer);
            fs::remove_file(path)?;
        }
        Ok(())
    }
}

fn segment_file_name(base_offset: u64) -> String {
    format!("{base_offset:020}.log")
}

/// A record read back from the log, with its position.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredRecord {
    pub partition: u32,
    pub offset: u64,
    pub envelope: SampleEnvelope,
}

#[derive(Debug, Clone, Copy)]
pub struct LogLimits {
    pub segment_bytes: u64,
    pub retention_ns: i64,
    pub retention_bytes: u64,
}

pub struct PartitionLog {
    partition: u32,
    dir: Option<PathBuf>,
    limits: LogLimits,
    segments: VecDeque<Segment>,
    next_offset: u64,
    total_bytes: u64,
    /// Lowest timestamp still guaranteed complete; `None` until something is dropped.
    retention_floor: Option<TimestampNs>,
    pub(crate) last_seq: HashMap<String, u64>,
}

impl PartitionLog {
    pub fn open(partition: u32, dir: Option<PathBuf>, limits: LogLimits) -> Result<Self, StreamError> {
        let mut log = Self {
            partition,
            dir: dir.clone(),
            limits,
            segments: VecDeque::new(),
            next_offset: 0,
            total_bytes: 0,
            retention_floor: None,
            last_seq: HashMap::new(),
        };
        if let Some(dir) = dir {
            fs::create_dir_all(&dir)?;
            log.recover(&dir)?;
        }
        Ok(log)
    }

    fn recover(&mut self, dir: &Path) -> Result<(), StreamError> {
        let mut bases: Vec<u64> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".log")?.parse::<u64>().ok()
            })
            .collect();
        bases.sort_unstable();
        if let Some(floor) = read_floor(dir)? {
            self.retention_floor = Some(floor);
        }
        for base in bases {
            let path = dir.join(segment_file_name(base));
            let mut segment = Segment::new(base, Some(dir))?;
            let mut reader = BufReader::new(File::open(&path)?);
            let mut line = Vec::new();
            let mut valid_len = 0u64;
            loop {
                line.clear();
                let n = reader.read_until(b'\n', &mut line)?;
                if n == 0 || line.last() != Some(&b'\n') {
                    break;
                }
                let env = SampleEnvelope::from_json(&line[..line.len() - 1])?;
                segment.note_record(env.timestamp_ns, n as u64);
                let last = self.last_seq.entry(env.source_id.clone()).or_insert(0);
                *last = (*last).max(env.seq);
                valid_len += n as u64;
            }
            // Drop a torn trailing write.
            let file = OpenOptions::new().write(true).open(&path)?;
            if file.metadata()?.len() != valid_len {
                tracing::warn!(?path, valid_len, "truncating torn segment tail");
                file.set_len(valid_len)?;
            }
            self.next_offset = base + segment.records;
            self.total_bytes += segment.size_bytes;
            self.segments.push_back(segment);
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn next_offset(&self) -> u64 {
        self.next_offset
    }

    pub fn newest_ts(&self) -> Option<TimestampNs> {
        self.segments.iter().filter(|s| s.records > 0).map(|s| s.max_ts).max()
    }

    pub fn retention_floor(&self) -> Option<TimestampNs> {
        self.retention_floor
    }

    /// Appends a canonical line and returns its offset.
    pub fn append(&mut self, env: &SampleEnvelope) -> Result<u64, StreamError> {
        let mut line = env.to_canonical_json();
        line.push(b'\n');
        let needs_roll = match self.segments.back() {
            None => true,
            Some(seg) => seg.size_bytes + line.len() as u64 > self.limits.segment_bytes && seg.records > 0,
        };
        if needs_roll {
            if let Some(seg) = self.segments.back_mut() {
                seg.flush()?;
            }
            let seg = Segment::new(self.next_offset, self.dir.as_deref())?;
            self.segments.push_back(seg);
        }
        let seg = self.segments.back_mut().expect("active segment");
        seg.append(&line, env.timestamp_ns)?;
        self.total_bytes += line.len() as u64;
        let offset = self.next_offset;
        self.next_offset += 1;
        if needs_roll {
            self.enforce_retention(None)?;
        }
        Ok(offset)
    }

    /// Drops closed segments that fall outside the retention limits. Time
    /// retention is measured against `newest_ts` (the newest timestamp seen on
    /// the topic), defaulting to this partition's newest.
    pub fn enforce_retention(&mut self, newest_ts: Option<TimestampNs>) -> Result<usize, StreamError> {
        let newest = newest_ts.or_else(|| self.segments.iter().map(|s| s.max_ts).max());
        let mut dropped = 0;
        while self.segments.len() > 1 {
            let front = &self.segments[0];
            let too_old = newest
                .map(|n| front.max_ts < n.saturating_sub(self.limits.retention_ns))
                .unwrap_or(false);
            let too_big = self.total_bytes > self.limits.retention_bytes;
            if !(too_old || too_big) {
                break;
            }
            let seg = self.segments.pop_front().expect("front segment");
            self.total_bytes -= seg.size_bytes;
            let floor = seg.max_ts.saturating_add(1);
            self.retention_floor = Some(self.retention_floor.map_or(floor, |f| f.max(floor)));
            seg.remove()?;
            dropped += 1;
        }
        if dropped > 0 {
            if let (Some(dir), Some(floor)) = (&self.dir, self.retention_floor) {
                fs::write(dir.join("floor"), floor.to_string())?;
            }
        }
        Ok(dropped)
    }

    pub fn flush(&mut self) -> Result<(), StreamError> {
        if let Some(seg) = self.segments.back_mut() {
            seg.flush()?;
        }
        Ok(())
    }

    /// Every retained record with `t0 <= ts <= t1`, in offset order.
    pub fn scan_range(&mut self, t0: TimestampNs, t1: TimestampNs) -> Result<Vec<StoredRecord>, StreamError> {
        let mut out = Vec::new();
        for seg in self.segments.iter_mut() {
            if seg.records == 0 || seg.max_ts < t0 || seg.min_ts > t1 {
                continue;
            }
            for i in 0..seg.blocks.len() {
                let block = seg.blocks[i];
                if block.max_ts < t0 || block.min_ts > t1 {
                    continue;
                }
                let end = seg.block_end(i);
                let bytes = seg.read_bytes(block.byte_pos, end)?;
                for (k, line) in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()).enumerate() {
                    let env = SampleEnvelope::from_json(line)?;
                    if env.timestamp_ns >= t0 && env.timestamp_ns <= t1 {
                        out.push(StoredRecord {
                            partition: self.partition,
                            offset: block.first_offset + k as u64,
                            envelope: env,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Raw retained bytes, concatenated in offset order.
    pub fn raw_bytes(&mut self) -> Result<Vec<u8>, StreamError> {
        let mut out = Vec::new();
        for seg in self.segments.iter_mut() {
            let size = seg.size_bytes;
            out.extend(seg.read_bytes(0, size)?);
        }
        Ok(out)
    }
}

fn read_floor(dir: &Path) -> Result<Option<TimestampNs>, StreamError> {
    match fs::read_to_string(dir.join("floor")) {
        Ok(s) => Ok(s.trim().parse().ok()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}
