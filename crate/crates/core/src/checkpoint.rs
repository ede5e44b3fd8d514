//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`, strings length-prefixed UTF-8:
//!
//! ```text
//! "PDAE1" version
//! meta_count { key value }
//! store_count { name param_count { name frozen:u8 rank dims.. f32 data.. } }
//! sha256(everything above)
//! ```
//!
//! Metadata and parameters are kept sorted, so loading and saving again
//! reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use pdae_autograd::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Conditioner, ConditionerSpec, EpsBundle, LatentBundle, PdaeBundle};
use crate::networks::{Encoder, EncoderSpec, EpsNet, GradientEstimator, LatentDenoiser, LatentSpec, UNetSpec};
use crate::schedule::ScheduleSpec;

pub const MAGIC: &[u8; 5] = b"PDAE1";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    /// Usually `ema` (the weights used for inference) and `raw`.
    pub stores: BTreeMap<String, ParamStore<f32>>,
}

impl Checkpoint {
    pub fn put(&mut self, key: &str, value: impl Display) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| bad(format!("missing `{key}`")))?;
        v.parse().map_err(|_| bad(format!("bad value `{v}` for `{key}`")))
    }

    fn put_list(&mut self, key: &str, v: &[usize]) {
        self.put(key, v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
    }

    fn get_list(&self, key: &str) -> Result<Vec<usize>> {
        let v: String = self.get(key)?;
        parse_list(&v).ok_or_else(|| bad(format!("bad list `{v}` for `{key}`")))
    }

    pub fn kind(&self) -> Result<String> {
        self.get("kind")
    }

    fn expect_kind(&self, want: &str) -> Result<()> {
        let k = self.kind()?;
        if k != want {
            return Err(bad(format!("expected a `{want}` checkpoint, found `{k}`")));
        }
        Ok(())
    }

    fn store(&self, name: &str) -> Result<&ParamStore<f32>> {
        self.stores.get(name).ok_or_else(|| bad(format!("missing parameter store `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, VERSION);
        put_u32(&mut b, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut b, k);
            put_str(&mut b, v);
        }
        put_u32(&mut b, self.stores.len() as u32);
        for (name, store) in &self.stores {
            put_str(&mut b, name);
            put_u32(&mut b, store.len() as u32);
            for (pname, t) in store.iter() {
                put_str(&mut b, pname);
                b.push(u8::from(!store.is_trainable(pname)));
                put_u32(&mut b, t.rank() as u32);
                for &d in t.shape() {
                    put_u32(&mut b, d as u32);
                }
                for v in t.data() {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { b: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            ck.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let mut store = ParamStore::new();
            for _ in 0..r.u32()? {
                let pname = r.str()?;
                let frozen = r.take(1)?[0] != 0;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                store.insert(pname.clone(), Tensor::from_vec(&shape, data)?);
                if frozen {
                    store.freeze(&pname);
                }
            }
            ck.stores.insert(name, store);
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(ck)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = path.file_name().ok_or_else(|| bad("checkpoint path has no file name"))?;
        let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path).inspect_err(|_| {
            let _ = std::fs::remove_file(&tmp);
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn set_counters(&mut self, steps: usize, images: usize) {
        self.put("train.steps_done", steps);
        self.put("train.images_seen", images);
    }

    /// Copies `pairs` under `config.` for provenance.
    pub fn echo_config<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a String, &'a String)>) {
        for (k, v) in pairs {
            self.put(&format!("config.{k}"), v);
        }
    }

    fn put_schedule(&mut self, p: &str, s: &ScheduleSpec) {
        match *s {
            ScheduleSpec::Linear { steps, beta_start, beta_end } => {
                self.put(&format!("{p}.kind"), "linear");
                self.put(&format!("{p}.steps"), steps);
                self.put(&format!("{p}.beta_start"), f(beta_start));
                self.put(&format!("{p}.beta_end"), f(beta_end));
            }
            ScheduleSpec::Constant { steps, beta } => {
                self.put(&format!("{p}.kind"), "constant");
                self.put(&format!("{p}.steps"), steps);
                self.put(&format!("{p}.beta"), f(beta));
            }
        }
    }

    pub fn schedule(&self) -> Result<ScheduleSpec> {
        let p = "schedule";
        let kind: String = self.get(&format!("{p}.kind"))?;
        let steps = self.get(&format!("{p}.steps"))?;
        match kind.as_str() {
            "linear" => Ok(ScheduleSpec::Linear {
                steps,
                beta_start: self.get(&format!("{p}.beta_start"))?,
                beta_end: self.get(&format!("{p}.beta_end"))?,
            }),
            "constant" => Ok(ScheduleSpec::Constant { steps, beta: self.get(&format!("{p}.beta"))? }),
            k => Err(bad(format!("unknown schedule kind `{k}`"))),
        }
    }

    fn put_unet(&mut self, s: &UNetSpec) {
        self.put("unet.in_channels", s.in_channels);
        self.put("unet.image_size", s.image_size);
        self.put("unet.base_channels", s.base_channels);
        self.put_list("unet.channel_mults", &s.channel_mults);
        self.put_list("unet.attention_resolutions", &s.attention_resolutions);
        self.put("unet.time_embed_dim", s.time_embed_dim);
        self.put("unet.groups", s.groups);
        self.put("unet.num_classes", s.num_classes);
        self.put("unet.dropout", f(s.dropout));
    }

    pub fn unet(&self) -> Result<UNetSpec> {
        Ok(UNetSpec {
            in_channels: self.get("unet.in_channels")?,
            image_size: self.get("unet.image_size")?,
            base_channels: self.get("unet.base_channels")?,
            channel_mults: self.get_list("unet.channel_mults")?,
            attention_resolutions: self.get_list("unet.attention_resolutions")?,
            time_embed_dim: self.get("unet.time_embed_dim")?,
            groups: self.get("unet.groups")?,
            num_classes: self.get("unet.num_classes")?,
            dropout: self.get("unet.dropout")?,
        })
    }

    fn put_stores(&mut self, ema: &ParamStore<f32>, raw: Option<&ParamStore<f32>>) {
        self.stores.insert("ema".into(), ema.clone());
        if let Some(r) = raw {
            self.stores.insert("raw".into(), r.clone());
        }
    }

    pub fn from_eps(b: &EpsBundle, raw: Option<&ParamStore<f32>>, schedule: &ScheduleSpec) -> Self {
        let mut ck = Self::default();
        ck.put("kind", "ddpm");
        ck.put_schedule("schedule", schedule);
        ck.put_unet(b.spec());
        ck.put_stores(&b.params, raw);
        ck
    }

    pub fn to_eps(&self) -> Result<EpsBundle> {
        self.expect_kind("ddpm")?;
        EpsBundle::new(&self.unet()?, self.store("ema")?.clone())
    }

    pub fn from_pdae(b: &PdaeBundle, raw: Option<&ParamStore<f32>>, schedule: &ScheduleSpec) -> Self {
        let mut ck = Self::default();
        ck.put("kind", "pdae");
        ck.put_schedule("schedule", schedule);
        ck.put_unet(b.spec());
        match &b.cond {
            Conditioner::Encoder(e) => {
                ck.put("cond.kind", "encoder");
                ck.put("encoder.base_channels", e.spec.base_channels);
                ck.put_list("encoder.channel_mults", &e.spec.channel_mults);
                ck.put_list("encoder.attention_resolutions", &e.spec.attention_resolutions);
                ck.put("encoder.groups", e.spec.groups);
                ck.put("encoder.z_dim", e.spec.z_dim);
            }
            Conditioner::Labels { classes } => {
                ck.put("cond.kind", "labels");
                ck.put("cond.classes", classes);
            }
        }
        ck.put("frozen_digest", crate::training::frozen_digest(&b.params));
        ck.put_stores(&b.params, raw);
        ck
    }

    pub fn conditioner(&self) -> Result<ConditionerSpec> {
        let kind: String = self.get("cond.kind")?;
        match kind.as_str() {
            "encoder" => Ok(ConditionerSpec::Encoder(EncoderSpec {
                base_channels: self.get("encoder.base_channels")?,
                channel_mults: self.get_list("encoder.channel_mults")?,
                attention_resolutions: self.get_list("encoder.attention_resolutions")?,
                groups: self.get("encoder.groups")?,
                z_dim: self.get("encoder.z_dim")?,
            })),
            "labels" => Ok(ConditionerSpec::Labels { classes: self.get("cond.classes")? }),
            k => Err(bad(format!("unknown conditioner `{k}`"))),
        }
    }

    pub fn to_pdae(&self) -> Result<PdaeBundle> {
        self.expect_kind("pdae")?;
        let spec = self.unet()?;
        let params = self.store("ema")?.clone();
        let digest: String = self.get("frozen_digest")?;
        if crate::training::frozen_digest(&params) != digest {
            return Err(bad("frozen parameters do not match their recorded digest"));
        }
        let mut scratch = ParamStore::<f32>::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let eps = EpsNet::new(&spec, &mut scratch, &mut rng)?;
        let cond = match self.conditioner()? {
            ConditionerSpec::Encoder(e) => Conditioner::Encoder(Encoder::new(&e, spec.in_channels, spec.image_size, &mut scratch, &mut rng)?),
            ConditionerSpec::Labels { classes } => Conditioner::Labels { classes },
        };
        let grad = GradientEstimator::new(&eps, cond.dim(), &mut scratch, &mut rng)?;
        if !scratch.same_topology(&params) {
            return Err(bad("parameters do not match the recorded networks"));
        }
        Ok(PdaeBundle { eps, cond, grad, params })
    }

    pub fn from_latent(b: &LatentBundle, raw: Option<&ParamStore<f32>>, schedule: &ScheduleSpec) -> Self {
        let mut ck = Self::default();
        ck.put("kind", "latent");
        ck.put_schedule("schedule", schedule);
        let s = &b.net.spec;
        ck.put("latent.z_dim", s.z_dim);
        ck.put("latent.hidden", s.hidden);
        ck.put("latent.layers", s.layers);
        ck.put("latent.time_embed_dim", s.time_embed_dim);
        ck.put("latent.groups", s.groups);
        ck.put("latent.mean", join_f64(&b.mean));
        ck.put("latent.std", join_f64(&b.std));
        ck.put_stores(&b.params, raw);
        ck
    }

    pub fn to_latent(&self) -> Result<LatentBundle> {
        self.expect_kind("latent")?;
        let spec = LatentSpec {
            z_dim: self.get("latent.z_dim")?,
            hidden: self.get("latent.hidden")?,
            layers: self.get("latent.layers")?,
            time_embed_dim: self.get("latent.time_embed_dim")?,
            groups: self.get("latent.groups")?,
        };
        let mut scratch = ParamStore::<f32>::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let net = LatentDenoiser::new(&spec, &mut scratch, &mut rng)?;
        let params = self.store("ema")?.clone();
        if !scratch.same_topology(&params) {
            return Err(bad("parameters do not match the latent denoiser"));
        }
        let parse = |k: &str| -> Result<Vec<f64>> {
            let v: String = self.get(k)?;
            v.split(',').map(|x| x.parse::<f64>().map_err(|_| bad(format!("bad number in `{k}`")))).collect()
        };
        let (mean, std) = (parse("latent.mean")?, parse("latent.std")?);
        if mean.len() != spec.z_dim || std.len() != spec.z_dim {
            return Err(bad("normalization statistics do not match z_dim"));
        }
        Ok(LatentBundle { net, params, mean, std })
    }
}

/// Shortest decimal that parses back to the same `f64`.
fn f(v: f64) -> String {
    format!("{v:?}")
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| f(*x)).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_list(v: &str) -> Option<Vec<usize>> {
    let v = v.trim();
    if v.is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(bad("truncated"));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
}
