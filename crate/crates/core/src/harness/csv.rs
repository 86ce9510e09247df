//! CSV writers. Every float is printed with 9 significant digits.

use std::io::Write;

use super::eval::{EvalRecord, ExtrapolationRecord, ProbeRecord, SensitivityReport};
use super::LossRecord;
use crate::error::Result;

pub const MSE_CURVE_HEADER: &str = "scheme,pe,ood,length,episodes,mse,mse_norm";
pub const SENSITIVITY_HEADER: &str = "scheme,n,permutations,tau,change_freq,pred_std";
pub const PROBE_HEADER: &str = "scheme,layer,probe_mse";
pub const EXTRAPOLATION_HEADER: &str = "scheme,pe,train_len,eval_len,mse_train_len,mse_eval_len,ratio";
pub const LOSS_HEADER: &str = "step,loss";

pub fn float(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn write_mse_curve(records: &[EvalRecord], header: bool, out: &mut impl Write) -> Result<()> {
    if header {
        writeln!(out, "{MSE_CURVE_HEADER}")?;
    }
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scheme,
            r.pe,
            r.ood,
            r.length,
            r.episodes,
            float(r.mse),
            float(r.mse_norm)
        )?;
    }
    Ok(())
}

pub fn write_sensitivity(records: &[SensitivityReport], header: bool, out: &mut impl Write) -> Result<()> {
    if header {
        writeln!(out, "{SENSITIVITY_HEADER}")?;
    }
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.scheme,
            r.n,
            r.permutations,
            float(r.tau),
            float(r.change_freq),
            float(r.pred_std)
        )?;
    }
    Ok(())
}

pub fn write_probe(records: &[ProbeRecord], header: bool, out: &mut impl Write) -> Result<()> {
    if header {
        writeln!(out, "{PROBE_HEADER}")?;
    }
    for r in records {
        writeln!(out, "{},{},{}", r.scheme, r.layer, float(r.probe_mse))?;
    }
    Ok(())
}

pub fn write_extrapolation(records: &[ExtrapolationRecord], header: bool, out: &mut impl Write) -> Result<()> {
    if header {
        writeln!(out, "{EXTRAPOLATION_HEADER}")?;
    }
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scheme,
            r.pe,
            r.train_len,
            r.eval_len,
            float(r.mse_train_len),
            float(r.mse_eval_len),
            float(r.ratio)
        )?;
    }
    Ok(())
}

pub fn write_loss_trace(trace: &[LossRecord], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{LOSS_HEADER}")?;
    for r in trace {
        writeln!(out, "{},{}", r.step, float(r.loss))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::OodShift;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(float(1.0 / 3.0), "3.33333333e-1");
        assert_eq!(float(0.0), "0.00000000e0");
        let parsed: f64 = float(std::f64::consts::PI).parse().unwrap();
        assert!((parsed - std::f64::consts::PI).abs() < 1e-8);
    }

    #[test]
    fn mse_curve_rows() {
        let rec = EvalRecord {
            scheme: "invicl".into(),
            pe: "symmetric".into(),
            ood: OodShift::None,
            length: 10,
            episodes: 5,
            mse: 0.5,
            mse_norm: 0.1,
        };
        let mut buf = Vec::new();
        write_mse_curve(&[rec], true, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "scheme,pe,ood,length,episodes,mse,mse_norm\ninvicl,symmetric,none,10,5,5.00000000e-1,1.00000000e-1\n"
        );
    }
}
