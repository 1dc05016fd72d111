//! Architecture hyper-parameters shared by every network.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square crop size `S`; a power of two ≥ 16.
    pub image_size: usize,
    /// `d_a`.
    pub audio_dim: usize,
    /// `d_f`.
    pub face_dim: usize,
    /// Channels at full resolution; doubling per halving.
    pub enc_base_channels: usize,
    pub enc_max_channels: usize,
    pub gen_base_channels: usize,
    pub gen_max_channels: usize,
    pub disc_base_channels: usize,
    pub disc_max_channels: usize,
    pub audio_base_channels: usize,
    /// Include the face bottleneck in the style vector (otherwise those slots
    /// are zero).
    pub use_face_style: bool,
    /// Optional fully-connected layers applied to `w` before the per-layer
    /// affines (0 = affines act on `w` directly).
    pub mapping_layers: usize,
    /// Embedding size of both synchrony towers.
    pub sync_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            audio_dim: 64,
            face_dim: 64,
            enc_base_channels: 8,
            enc_max_channels: 64,
            gen_base_channels: 8,
            gen_max_channels: 64,
            disc_base_channels: 8,
            disc_max_channels: 64,
            audio_base_channels: 16,
            use_face_style: true,
            mapping_layers: 0,
            sync_dim: 64,
        }
    }
}

impl ModelConfig {
    /// Minimal configuration for numerical checks.
    pub fn tiny(image_size: usize) -> Self {
        Self {
            image_size,
            audio_dim: 6,
            face_dim: 5,
            enc_base_channels: 2,
            enc_max_channels: 4,
            gen_base_channels: 2,
            gen_max_channels: 4,
            disc_base_channels: 2,
            disc_max_channels: 4,
            audio_base_channels: 2,
            use_face_style: true,
            mapping_layers: 0,
            sync_dim: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            )));
        }
        let positive = [
            ("audio_dim", self.audio_dim),
            ("face_dim", self.face_dim),
            ("enc_base_channels", self.enc_base_channels),
            ("gen_base_channels", self.gen_base_channels),
            ("disc_base_channels", self.disc_base_channels),
            ("audio_base_channels", self.audio_base_channels),
            ("sync_dim", self.sync_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// `L = 2·log2(S) − 2` style-convolution layers.
    pub fn num_layers(&self) -> usize {
        2 * self.image_size.trailing_zeros() as usize - 2
    }

    /// Spatial resolution of (1-based) layer `l`: `4·2^floor((l−1)/2)`.
    pub fn layer_res(&self, l: usize) -> usize {
        4 << ((l - 1) / 2)
    }

    /// Style vector size `d_w = d_a + d_f`.
    pub fn style_dim(&self) -> usize {
        self.audio_dim + self.face_dim
    }

    /// Resolutions from 4 up to `S`.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut r = 4;
        let mut out = Vec::new();
        while r <= self.image_size {
            out.push(r);
            r *= 2;
        }
        out
    }

    fn width(&self, base: usize, max: usize, res: usize) -> usize {
        (base * (self.image_size / res)).min(max)
    }

    pub fn enc_channels(&self, res: usize) -> usize {
        self.width(self.enc_base_channels, self.enc_max_channels, res)
    }

    pub fn gen_channels(&self, res: usize) -> usize {
        self.width(self.gen_base_channels, self.gen_max_channels, res)
    }

    pub fn disc_channels(&self, res: usize) -> usize {
        self.width(self.disc_base_channels, self.disc_max_channels, res)
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("model.{k}"), v);
        };
        put("image_size", self.image_size.to_string());
        put("audio_dim", self.audio_dim.to_string());
        put("face_dim", self.face_dim.to_string());
        put("enc_base_channels", self.enc_base_channels.to_string());
        put("enc_max_channels", self.enc_max_channels.to_string());
        put("gen_base_channels", self.gen_base_channels.to_string());
        put("gen_max_channels", self.gen_max_channels.to_string());
        put("disc_base_channels", self.disc_base_channels.to_string());
        put("disc_max_channels", self.disc_max_channels.to_string());
        put("audio_base_channels", self.audio_base_channels.to_string());
        put("use_face_style", self.use_face_style.to_string());
        put("mapping_layers", self.mapping_layers.to_string());
        put("sync_dim", self.sync_dim.to_string());
        m
    }

    /// Reads `model.*` keys, falling back to defaults for absent ones.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in kv {
            let Some(key) = k.strip_prefix("model.") else { continue };
            let num = || -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("{k}: expected an integer, got `{v}`")))
            };
            match key {
                "image_size" => c.image_size = num()?,
                "audio_dim" => c.audio_dim = num()?,
                "face_dim" => c.face_dim = num()?,
                "enc_base_channels" => c.enc_base_channels = num()?,
                "enc_max_channels" => c.enc_max_channels = num()?,
                "gen_base_channels" => c.gen_base_channels = num()?,
                "gen_max_channels" => c.gen_max_channels = num()?,
                "disc_base_channels" => c.disc_base_channels = num()?,
                "disc_max_channels" => c.disc_max_channels = num()?,
                "audio_base_channels" => c.audio_base_channels = num()?,
                "mapping_layers" => c.mapping_layers = num()?,
                "sync_dim" => c.sync_dim = num()?,
                "use_face_style" => {
                    c.use_face_style = v
                        .parse()
                        .map_err(|_| Error::Config(format!("{k}: expected true/false")))?
                }
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Short hash of the architecture; adapters and checkpoints must agree on it.
    pub fn fingerprint(&self) -> String {
        let text: String = self
            .to_kv()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
