use crate::error::{CmaeError, Result};
use crate::nn::ParamStore;

/// Parameter groups that have momentum copies.
pub const MOMENTUM_PREFIXES: [&str; 2] = ["encoder.", "projector."];

/// Online parameters (every trainable tensor) plus the momentum copies of
/// the encoder and projector. The momentum store is never differentiated.
pub struct EncoderState {
    pub online: ParamStore,
    pub momentum: ParamStore,
}

impl EncoderState {
    /// Momentum copies start as exact copies of the online weights.
    pub fn new(online: ParamStore) -> Result<Self> {
        let momentum = online.copy_prefixes(&MOMENTUM_PREFIXES)?;
        Ok(Self { online, momentum })
    }

    pub fn momentum_update(&self, m: f64) -> Result<()> {
        momentum_update(&self.online, &self.momentum, m)
    }
}

/// `θ_momentum ← m·θ_momentum + (1−m)·θ_online` for every momentum tensor.
pub fn momentum_update(online: &ParamStore, momentum: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(CmaeError::config(format!("momentum {m} outside [0,1]")));
    }
    for (name, var) in momentum.vars() {
        let src = online
            .get(&name)
            .ok_or_else(|| CmaeError::shape(format!("online store lacks `{name}`")))?;
        let next = ((var.as_tensor().detach() * m)? + (src.as_tensor().detach() * (1.0 - m))?)?;
        var.set(&next)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::{DType, Device, Tensor};

    fn state(online_val: f64, momentum_val: f64) -> EncoderState {
        let online = ParamStore::new(DType::F64, Device::Cpu, 0);
        online.scope("encoder", true).get("w", &[3], Init::Values(vec![online_val; 3])).unwrap();
        online.scope("decoder", true).get("w", &[3], Init::Zeros).unwrap();
        let st = EncoderState::new(online).unwrap();
        st.momentum
            .get("encoder.w")
            .unwrap()
            .set(&Tensor::new(&[momentum_val; 3], &Device::Cpu).unwrap())
            .unwrap();
        st
    }

    fn mval(st: &EncoderState) -> f64 {
        st.momentum.get("encoder.w").unwrap().as_tensor().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn only_encoder_and_projector_are_copied() {
        let st = state(1.0, 1.0);
        assert_eq!(st.momentum.names(), vec!["encoder.w"]);
    }

    #[test]
    fn closed_forms() {
        let st = state(0.0, 1.0);
        st.momentum_update(0.99).unwrap();
        assert!((mval(&st) - 0.99).abs() < 1e-15);

        let st = state(0.3, 0.7);
        st.momentum_update(1.0).unwrap();
        assert_eq!(mval(&st), 0.7);

        let st = state(0.3, 0.7);
        st.momentum_update(0.0).unwrap();
        assert_eq!(mval(&st), 0.3);

        assert!(state(0.0, 0.0).momentum_update(1.5).is_err());
    }
}
