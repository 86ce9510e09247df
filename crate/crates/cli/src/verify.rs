use std::path::PathBuf;
use std::time::Instant;

use clap::Args;

use invicl_core::gd_equivalence::{
    per_layer_max, sweep, write_report_csv, EquivalenceReport, LayerOptions, SweepConfig, Timing, COLLAPSE_TOL,
    SINGLE_LAYER_TOL,
};
use invicl_core::masks::{invariant_and_non_leaking, scan_invariant_masks, ExampleMask};

use crate::output::{check_outputs, write_file};
use crate::{CliError, CliResult};

#[derive(Args, Debug, Clone)]
pub struct MasksArgs {
    #[arg(long, default_value_t = 3)]
    pub n: usize,
}

#[derive(Args, Debug, Clone)]
pub struct GdArgs {
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    #[arg(long, default_value_t = 0.01)]
    pub eta: f64,
    #[arg(long, default_value_t = 5)]
    pub layers: usize,
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    /// Read order inside a layer.
    #[arg(long, default_value = "fresh")]
    pub timing: Timing,
    /// Report every timing, not just `--timing`.
    #[arg(long)]
    pub all_timings: bool,
    /// Let each second copy also aggregate its own first copy.
    #[arg(long)]
    pub second_copy_self: bool,
    /// Layers for the single-example collapse check.
    #[arg(long, default_value_t = 10)]
    pub collapse_layers: usize,
    /// Per-seed, per-layer deviations.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn name(mask: &ExampleMask) -> &'static str {
    let n = mask.n_slots();
    if *mask == ExampleMask::diagonal(n) {
        "diagonal"
    } else if *mask == ExampleMask::off_diagonal(n) {
        "off-diagonal"
    } else if *mask == ExampleMask::full(n) {
        "full"
    } else {
        "other"
    }
}

pub fn masks(args: MasksArgs) -> CliResult {
    let started = Instant::now();
    let scan = scan_invariant_masks(args.n)?;
    let both = invariant_and_non_leaking(args.n)?;
    for m in &scan.invariant {
        println!("{}:\n{}", name(m), m.to_grid());
    }
    let names = |ms: &[ExampleMask]| ms.iter().map(name).collect::<Vec<_>>().join(", ");
    println!(
        "{} masks scanned, {} invariant, intersection: {}",
        scan.scanned,
        scan.invariant.len(),
        names(&both)
    );
    println!(
        "({} masks with a fully blocked row skipped; {:.3}s)",
        scan.degenerate,
        started.elapsed().as_secs_f64()
    );
    let n = args.n;
    let expected = [ExampleMask::diagonal(n), ExampleMask::off_diagonal(n), ExampleMask::full(n)];
    if let Some(bad) = scan.invariant.iter().find(|m| !expected.contains(m)) {
        return Err(CliError::Verification(format!("unexpected invariant mask\n{}", bad.to_grid())));
    }
    if let Some(missing) = expected.iter().find(|m| !scan.invariant.contains(m)) {
        return Err(CliError::Verification(format!("{} mask not found invariant", name(missing))));
    }
    if both != [ExampleMask::diagonal(n)] {
        return Err(CliError::Verification(format!("intersection is {{{}}}, expected {{diagonal}}", names(&both))));
    }
    Ok(())
}

fn fmt_devs(devs: &[f64]) -> String {
    devs.iter().map(|d| format!("{d:.3e}")).collect::<Vec<_>>().join(" ")
}

fn worst(reports: &[(u64, EquivalenceReport)], layer: usize) -> (u64, f64) {
    reports
        .iter()
        .map(|(s, r)| (*s, r.deviations[layer]))
        .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

pub fn gd(args: GdArgs) -> CliResult {
    if args.seeds == 0 || args.layers == 0 {
        return Err(CliError::Usage("--seeds and --layers must be at least 1".into()));
    }
    if let Some(csv) = &args.csv {
        check_outputs(&[csv], args.force)?;
    }
    let timings = if args.all_timings { Timing::ALL.to_vec() } else { vec![args.timing] };
    let cfg = SweepConfig {
        n: args.n,
        d: args.d,
        eta: args.eta,
        layers: args.layers,
        seeds: args.seeds,
    };
    let mut all = Vec::new();
    let mut failures = Vec::new();
    for timing in timings {
        let opts = LayerOptions {
            timing,
            second_copy_self: args.second_copy_self,
        };
        let reports = sweep(&cfg, opts)?;
        let per_layer = per_layer_max(&reports, false);
        let (seed, first) = worst(&reports, 0);
        let pass = first <= SINGLE_LAYER_TOL;
        println!(
            "timing={timing} self={}: single layer max deviation {first:.3e} (seed {seed}) {} at {SINGLE_LAYER_TOL:e}",
            args.second_copy_self,
            if pass { "PASS" } else { "FAIL" }
        );
        println!("  per-layer max vs corrected recurrence: {}", fmt_devs(&per_layer));
        println!("  per-layer max vs plain GD:             {}", fmt_devs(&per_layer_max(&reports, true)));
        if !pass {
            failures.push(format!("timing={timing} single layer deviation {first:.3e} at seed {seed}"));
        }

        let one = SweepConfig {
            n: 1,
            layers: args.collapse_layers,
            ..cfg
        };
        let collapse = per_layer_max(&sweep(&one, opts)?, true);
        let max = collapse.iter().copied().fold(0.0, f64::max);
        println!(
            "  n=1 collapse over {} layers: max deviation from plain GD {max:.3e} {} at {COLLAPSE_TOL:e}",
            args.collapse_layers,
            if max <= COLLAPSE_TOL { "PASS" } else { "FAIL" }
        );
        all.extend(reports);
    }
    if let Some(csv) = &args.csv {
        write_file(csv, |w| write_report_csv(&all, w))?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failures.join("; ")))
    }
}
