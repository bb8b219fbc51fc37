//! `DPBK` checkpoint persistence.
//!
//! A checkpoint is everything needed to resume training or run inference:
//! schedule and codec parameters, model architecture and flat parameters,
//! Adam moments, the training iteration, and the master seed. The layout is
//! fixed little-endian, so files written on one platform load bit-exactly on
//! any other.

use std::io::{Read, Write};
use std::path::Path;

use crate::codec::LinearCodec;
use crate::dataset::Task;
use crate::denoiser::{AdamState, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::schedule::{Schedule, ScheduleParams};
use crate::tensor::Tensor;

const DPBK_MAGIC: &[u8; 4] = b"DPBK";
const DPBK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: ScheduleParams,
    pub codec_factor: usize,
    pub codec_scale: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub task: Task,
    pub dan_enabled: bool,
    pub model: DenoiserConfig,
    pub theta: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub adam_step: u64,
    pub iteration: u64,
    pub master_seed: u64,
}

impl Checkpoint {
    pub fn build_schedule(&self) -> Result<Schedule> {
        self.schedule.build()
    }

    pub fn build_codec(&self) -> Result<LinearCodec> {
        LinearCodec::with_scale(
            self.image_height,
            self.image_width,
            self.channels,
            self.codec_factor,
            self.codec_scale,
        )
    }

    pub fn build_denoiser(&self) -> Result<Denoiser> {
        Denoiser::from_theta(self.model.clone(), self.theta.data().to_vec())
    }

    pub fn adam_state(&self) -> AdamState {
        AdamState::from_parts(
            self.adam_m.data().to_vec(),
            self.adam_v.data().to_vec(),
            self.adam_step,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, |w| {
            w.write_all(DPBK_MAGIC)?;
            w.write_all(&DPBK_VERSION.to_le_bytes())?;
            write_u64(w, self.schedule.t_max as u64)?;
            write_f64(w, self.schedule.beta_min)?;
            write_f64(w, self.schedule.beta_max)?;
            write_u64(w, self.codec_factor as u64)?;
            write_f64(w, self.codec_scale)?;
            write_u64(w, self.image_height as u64)?;
            write_u64(w, self.image_width as u64)?;
            write_u64(w, self.channels as u64)?;
            w.write_all(&[match self.task {
                Task::Depth => 0u8,
                Task::Normal => 1u8,
            }])?;
            w.write_all(&[self.dan_enabled as u8])?;
            write_u64(w, self.model.latent_len as u64)?;
            write_u64(w, self.model.hidden as u64)?;
            write_u64(w, self.model.blocks as u64)?;
            write_u64(w, self.model.time_embed as u64)?;
            write_u64(w, self.adam_step)?;
            write_u64(w, self.iteration)?;
            write_u64(w, self.master_seed)?;
            self.theta.write_blob(w)?;
            self.adam_m.write_blob(w)?;
            self.adam_v.write_blob(w)?;
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let fmt = |msg: &str| Error::Format(format!("DPBK: {msg}"));

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fmt("truncated header"))?;
        if &magic != DPBK_MAGIC {
            return Err(fmt("bad magic"));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v).map_err(|_| fmt("truncated version"))?;
        let version = u32::from_le_bytes(v);
        if version != DPBK_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }

        let t_max = read_u64(&mut r)? as usize;
        let beta_min = read_f64(&mut r)?;
        let beta_max = read_f64(&mut r)?;
        let codec_factor = read_u64(&mut r)? as usize;
        let codec_scale = read_f64(&mut r)?;
        let image_height = read_u64(&mut r)? as usize;
        let image_width = read_u64(&mut r)? as usize;
        let channels = read_u64(&mut r)? as usize;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags).map_err(|_| fmt("truncated flags"))?;
        let task = match flags[0] {
            0 => Task::Depth,
            1 => Task::Normal,
            other => return Err(fmt(&format!("unknown task tag {other}"))),
        };
        let dan_enabled = match flags[1] {
            0 => false,
            1 => true,
            other => return Err(fmt(&format!("bad dan flag {other}"))),
        };
        let latent_len = read_u64(&mut r)? as usize;
        let hidden = read_u64(&mut r)? as usize;
        let blocks = read_u64(&mut r)? as usize;
        let time_embed = read_u64(&mut r)? as usize;
        let adam_step = read_u64(&mut r)?;
        let iteration = read_u64(&mut r)?;
        let master_seed = read_u64(&mut r)?;
        let theta = Tensor::read_blob(&mut r)?;
        let adam_m = Tensor::read_blob(&mut r)?;
        let adam_v = Tensor::read_blob(&mut r)?;

        let model = DenoiserConfig {
            latent_len,
            hidden,
            blocks,
            time_embed,
            t_max,
        };
        let ckpt = Checkpoint {
            schedule: ScheduleParams {
                t_max,
                beta_min,
                beta_max,
            },
            codec_factor,
            codec_scale,
            image_height,
            image_width,
            channels,
            task,
            dan_enabled,
            model,
            theta,
            adam_m,
            adam_v,
            adam_step,
            iteration,
            master_seed,
        };
        if ckpt.theta.len() != ckpt.model.n_params() {
            return Err(fmt("theta length does not match architecture"));
        }
        if ckpt.adam_m.len() != ckpt.theta.len() || ckpt.adam_v.len() != ckpt.theta.len() {
            return Err(fmt("optimizer state does not match theta"));
        }
        Ok(ckpt)
    }
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("DPBK: truncated".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("DPBK: truncated".into()))?;
    Ok(f64::from_le_bytes(b))
}
