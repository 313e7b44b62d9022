//! Length-prefixed binary frames: `[u8 version][u64 LE length][payload]`.
//! The payload opens with a one-byte message tag; floats are little-endian
//! `f64`, counts are `u64`.

use std::io::{self, Read, Write};

use nalgebra::DVector;

use super::{DataMessage, FailureMessage, JobMessage, Message};
use crate::problem::SolutionPoint;

pub const VERSION: u8 = 1;
const MAX_FRAME: u64 = 1 << 32;

const TAG_STOP: u8 = 0;
const TAG_JOB: u8 = 1;
const TAG_DATA: u8 = 2;
const TAG_FAILED: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported frame version {0}")]
    Version(u8),
    #[error("malformed frame: {0}")]
    Malformed(String),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }
    fn point(&mut self, w: &SolutionPoint) {
        self.f64s(w.u.as_slice());
        self.f64(w.lambda);
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], WireError> {
        if self.0.len() < n {
            return Err(WireError::Malformed("payload truncated".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, item: usize) -> Result<usize, WireError> {
        let n = self.u64()?;
        if n.saturating_mul(item as u64) > self.0.len() as u64 {
            return Err(WireError::Malformed(format!("length {n} exceeds payload")));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>, WireError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn point(&mut self) -> Result<SolutionPoint, WireError> {
        let u = self.f64s()?;
        Ok(SolutionPoint::new(DVector::from_vec(u), self.f64()?))
    }
    fn finish(self) -> Result<(), WireError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(WireError::Malformed(format!("{} trailing bytes", self.0.len())))
        }
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match msg {
        Message::Stop(stop) => {
            w.u8(TAG_STOP);
            w.u8(u8::from(*stop));
        }
        Message::Job(j) => {
            w.u8(TAG_JOB);
            w.u64(j.id);
            w.u64(j.branch as u64);
            w.f64(j.delta_l0);
            w.u64(j.subintervals as u64);
            w.point(&j.w_start);
            match &j.w_prev {
                Some(p) => {
                    w.u8(1);
                    w.point(p);
                }
                None => w.u8(0),
            }
            w.point(&j.w_ref);
        }
        Message::Data(d) => {
            w.u8(TAG_DATA);
            w.u64(d.worker as u64);
            w.u64(d.job);
            w.f64s(&d.distances);
            w.u64(d.solutions.len() as u64);
            d.solutions.iter().for_each(|s| w.point(s));
            w.f64(d.lower_distance);
            w.f64(d.closing_distance);
        }
        Message::Failed(f) => {
            w.u8(TAG_FAILED);
            w.u64(f.worker as u64);
            w.u64(f.job);
            w.u64(f.reason.len() as u64);
            w.0.extend_from_slice(f.reason.as_bytes());
        }
    }
    w.0
}

pub fn decode(payload: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader(payload);
    let msg = match r.u8()? {
        TAG_STOP => match r.u8()? {
            0 => Message::Stop(false),
            1 => Message::Stop(true),
            b => return Err(WireError::Malformed(format!("stop flag {b}"))),
        },
        TAG_JOB => {
            let id = r.u64()?;
            let branch = r.u64()? as usize;
            let delta_l0 = r.f64()?;
            let subintervals = r.u64()? as usize;
            let w_start = r.point()?;
            let w_prev = match r.u8()? {
                0 => None,
                1 => Some(r.point()?),
                b => return Err(WireError::Malformed(format!("w_prev flag {b}"))),
            };
            let w_ref = r.point()?;
            Message::Job(JobMessage {
                id,
                branch,
                delta_l0,
                subintervals,
                w_start,
                w_prev,
                w_ref,
            })
        }
        TAG_DATA => {
            let worker = r.u64()? as usize;
            let job = r.u64()?;
            let distances = r.f64s()?;
            let n = r.len(16)?;
            let solutions = (0..n).map(|_| r.point()).collect::<Result<_, _>>()?;
            Message::Data(DataMessage {
                worker,
                job,
                distances,
                solutions,
                lower_distance: r.f64()?,
                closing_distance: r.f64()?,
            })
        }
        TAG_FAILED => {
            let worker = r.u64()? as usize;
            let job = r.u64()?;
            let n = r.len(1)?;
            let reason = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| WireError::Malformed(e.to_string()))?;
            Message::Failed(FailureMessage { worker, job, reason })
        }
        t => return Err(WireError::Malformed(format!("unknown tag {t}"))),
    };
    r.finish()?;
    Ok(msg)
}

pub fn write_frame(out: &mut impl Write, msg: &Message) -> Result<(), WireError> {
    let payload = encode(msg);
    out.write_all(&[VERSION])?;
    out.write_all(&(payload.len() as u64).to_le_bytes())?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before the header.
pub fn read_frame(input: &mut impl Read) -> Result<Option<Message>, WireError> {
    let mut version = [0u8; 1];
    match input.read_exact(&mut version) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    if version[0] != VERSION {
        return Err(WireError::Version(version[0]));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(WireError::Malformed(format!("frame of {len} bytes")));
    }
    let mut payload = vec![0u8; len as usize];
    input.read_exact(&mut payload)?;
    decode(&payload).map(Some)
}
