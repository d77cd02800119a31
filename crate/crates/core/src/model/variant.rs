use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::error::{CtdError, Result};
use crate::nn::SapConfig;
use crate::tensor::PoolKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantName {
    S,
    M,
    L,
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariantName::S => "S",
            VariantName::M => "M",
            VariantName::L => "L",
        })
    }
}

impl FromStr for VariantName {
    type Err = CtdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_start_matches("CTD-").trim_start_matches("ctd-") {
            "S" | "s" => Ok(VariantName::S),
            "M" | "m" => Ok(VariantName::M),
            "L" | "l" => Ok(VariantName::L),
            other => Err(CtdError::Config(format!(
                "unknown variant `{other}` (expected S, M or L)"
            ))),
        }
    }
}

/// Declarative description of one network variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantConfig {
    pub name: VariantName,
    pub backbone: BackboneConfig,
    /// Uniform decoder width.
    pub c_dec: usize,
    pub sap_enabled: bool,
    /// Replace CAM by `Up(d_p1) + d_p2` followed by one 3×3 unit.
    pub cam_substituted_by_conv3: bool,
    /// SAP (plus projection) ahead of SAM on E^3.
    pub extra_e3_sap: bool,
    /// SAM on E^2 ahead of the boundary 1×1 projection.
    pub extra_e2_sam: bool,
    pub sap: SapConfig,
    /// Kernel of the convolution that maps SAP's `N·C` channels to `c_dec`.
    pub sap_projection_kernel: usize,
    pub input_resolution: usize,
}

impl VariantConfig {
    /// MobileNetV2 encoder, no SAP, conv-3 in place of CAM.
    pub fn s() -> Self {
        VariantConfig {
            name: VariantName::S,
            backbone: BackboneConfig::mobilenetv2(),
            c_dec: 32,
            sap_enabled: false,
            cam_substituted_by_conv3: true,
            extra_e3_sap: false,
            extra_e2_sam: false,
            sap: SapConfig::default(),
            sap_projection_kernel: 3,
            input_resolution: 352,
        }
    }

    /// ResNet-18 encoder with SAP on E^4 and E^5.
    pub fn m() -> Self {
        VariantConfig {
            name: VariantName::M,
            backbone: BackboneConfig::resnet18(),
            c_dec: 64,
            sap_enabled: true,
            cam_substituted_by_conv3: false,
            extra_e3_sap: false,
            extra_e2_sam: false,
            sap: SapConfig::default(),
            sap_projection_kernel: 3,
            input_resolution: 352,
        }
    }

    /// ResNet-50 encoder plus the extra SAP on E^3 and SAM on E^2.
    pub fn l() -> Self {
        VariantConfig {
            name: VariantName::L,
            backbone: BackboneConfig::resnet50(),
            c_dec: 64,
            sap_enabled: true,
            cam_substituted_by_conv3: false,
            extra_e3_sap: true,
            extra_e2_sam: true,
            sap: SapConfig::default(),
            sap_projection_kernel: 1,
            input_resolution: 352,
        }
    }

    pub fn named(name: VariantName) -> Self {
        match name {
            VariantName::S => Self::s(),
            VariantName::M => Self::m(),
            VariantName::L => Self::l(),
        }
    }

    /// The variant's wiring over the tiny trainable encoder at 96×96.
    pub fn desk(name: VariantName) -> Self {
        VariantConfig {
            backbone: BackboneConfig::tiny(),
            c_dec: 32,
            input_resolution: 96,
            ..Self::named(name)
        }
    }

    pub fn with_backbone(mut self, backbone: BackboneConfig) -> Self {
        self.backbone = backbone;
        self
    }

    pub fn with_c_dec(mut self, c_dec: usize) -> Self {
        self.c_dec = c_dec;
        self
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.input_resolution = resolution;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let bad = |msg: &str| Err(CtdError::Config(format!("variant {}: {msg}", self.name)));
        match self.name {
            VariantName::S if self.sap_enabled || !self.cam_substituted_by_conv3 => {
                return bad("S requires sap disabled and the conv-3 substitution");
            }
            VariantName::M
                if !self.sap_enabled
                    || self.extra_e3_sap
                    || self.extra_e2_sam
                    || self.cam_substituted_by_conv3 =>
            {
                return bad("M requires SAP, CAM and no extra SAP/SAM");
            }
            VariantName::L if !self.extra_e3_sap || !self.extra_e2_sam => {
                return bad("L requires the extra SAP on E3 and SAM on E2");
            }
            _ => {}
        }
        if self.c_dec == 0 {
            return bad("decoder width must be positive");
        }
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(32) {
            return bad("input resolution must be a positive multiple of 32");
        }
        if self.sap.branches == 0 {
            return bad("SAP needs at least one branch");
        }
        if self.sap_projection_kernel.is_multiple_of(2) {
            return bad("SAP projection kernel must be odd");
        }
        Ok(())
    }

    /// Stable `key=value` rendering; round-trips through [`VariantConfig::parse_canonical`].
    pub fn canonical(&self) -> String {
        let list = |v: [usize; 4]| v.map(|x| x.to_string()).join(",");
        let flag = |b: bool| if b { "1" } else { "0" };
        format!(
            "name={} backbone={} channels={} depths={} width={} c_dec={} sap={} sap_pool={} \
             sap_branches={} sap_proj_k={} cam_conv3={} e3_sap={} e2_sam={} resolution={}",
            self.name,
            self.backbone.kind,
            list(self.backbone.stage_channels),
            list(self.backbone.depths),
            self.backbone.width_multiplier,
            self.c_dec,
            flag(self.sap_enabled),
            self.sap.kind,
            self.sap.branches,
            self.sap_projection_kernel,
            flag(self.cam_substituted_by_conv3),
            flag(self.extra_e3_sap),
            flag(self.extra_e2_sam),
            self.input_resolution,
        )
    }

    pub fn parse_canonical(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for tok in text.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| CtdError::Config(format!("variant: bad token `{tok}`")))?;
            map.insert(k, v);
        }
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| CtdError::Config(format!("variant: missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| CtdError::Config(format!("variant: `{k}` is not an integer")))
        };
        let flag = |k: &str| -> Result<bool> {
            match get(k)? {
                "1" => Ok(true),
                "0" => Ok(false),
                v => Err(CtdError::Config(format!(
                    "variant: `{k}` must be 0 or 1, got `{v}`"
                ))),
            }
        };
        let list = |k: &str| -> Result<[usize; 4]> {
            let v: Vec<usize> = get(k)?
                .split(',')
                .map(|x| x.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CtdError::Config(format!("variant: bad list `{k}`")))?;
            v.try_into()
                .map_err(|_| CtdError::Config(format!("variant: `{k}` needs four entries")))
        };
        let kind: BackboneKind = get("backbone")?.parse()?;
        let cfg = VariantConfig {
            name: get("name")?.parse()?,
            backbone: BackboneConfig {
                kind,
                stage_channels: list("channels")?,
                depths: list("depths")?,
                width_multiplier: get("width")?
                    .parse()
                    .map_err(|_| CtdError::Config("variant: bad width".into()))?,
            },
            c_dec: num("c_dec")?,
            sap_enabled: flag("sap")?,
            cam_substituted_by_conv3: flag("cam_conv3")?,
            extra_e3_sap: flag("e3_sap")?,
            extra_e2_sam: flag("e2_sam")?,
            sap: SapConfig {
                branches: num("sap_branches")?,
                kind: get("sap_pool")?
                    .parse::<PoolKind>()
                    .map_err(CtdError::Config)?,
            },
            sap_projection_kernel: num("sap_proj_k")?,
            input_resolution: num("resolution")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 16 hex digits of SHA-256 over the canonical rendering.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_round_trip() {
        for v in [
            VariantConfig::s(),
            VariantConfig::m(),
            VariantConfig::l(),
            VariantConfig::desk(VariantName::M),
        ] {
            v.validate().unwrap();
            let back = VariantConfig::parse_canonical(&v.canonical()).unwrap();
            assert_eq!(back, v);
            assert_eq!(back.digest(), v.digest());
        }
        assert_ne!(VariantConfig::s().digest(), VariantConfig::m().digest());
    }

    #[test]
    fn variant_rules_are_enforced() {
        let mut s = VariantConfig::s();
        s.sap_enabled = true;
        assert!(matches!(s.validate(), Err(CtdError::Config(_))));
        let mut m = VariantConfig::m();
        m.extra_e2_sam = true;
        assert!(m.validate().is_err());
        let mut l = VariantConfig::l();
        l.extra_e3_sap = false;
        assert!(l.validate().is_err());
        assert!(VariantConfig::m().with_resolution(100).validate().is_err());
    }
}
