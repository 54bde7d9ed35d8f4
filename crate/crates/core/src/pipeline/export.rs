use std::fs;
use std::path::{Path, PathBuf};

use crate::data::MixtureExample;
use crate::error::{Error, Result};
use crate::models::System;
use crate::numcore::{Scalar, Tensor};
use crate::signal::Waveform;

/// Exponent applied to every cell for display.
pub const LATENT_DISPLAY_POWER: f64 = 0.1;

/// Encoder latent of `w` with bases sorted by energy (descending) and
/// each cell raised to [`LATENT_DISPLAY_POWER`]. Returns the original
/// basis index of every row alongside the `[bases, frames]` image.
pub fn latent_image<T: Scalar>(sys: &System<T>, w: &Waveform) -> Result<(Vec<usize>, Tensor<f64>)> {
    let v: Tensor<f64> = sys.encode(w)?.cast();
    let (k, f) = v.dims2()?;
    let energy: Vec<f64> = v.data().chunks(f).map(|r| r.iter().map(|x| x * x).sum()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
    let mut data = Vec::with_capacity(k * f);
    for &row in &order {
        data.extend(v.data()[row * f..(row + 1) * f].iter().map(|x| x.abs().powf(LATENT_DISPLAY_POWER)));
    }
    Ok((order, Tensor::new([k, f], data)?))
}

fn write_image(path: &Path, order: &[usize], img: &Tensor<f64>) -> Result<()> {
    let (_, f) = img.dims2()?;
    let mut out = String::from("basis");
    for j in 0..f {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (row, basis) in img.data().chunks(f).zip(order) {
        out.push_str(&basis.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `latents_<i>_mixture.csv` and `latents_<i>_source<j>.csv` for
/// every example into `out_dir`; returns the written paths.
pub fn export_latents<T: Scalar>(sys: &System<T>, examples: &[MixtureExample], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let mut emit = |name: String, w: &Waveform| -> Result<()> {
            let (order, img) = latent_image(sys, w)?;
            let path = out_dir.join(name);
            write_image(&path, &order, &img)?;
            written.push(path);
            Ok(())
        };
        emit(format!("latents_{i:04}_mixture.csv"), &ex.mixture)?;
        for (j, s) in ex.sources.iter().enumerate() {
            emit(format!("latents_{i:04}_source{j}.csv"), s)?;
        }
    }
    Ok(written)
}

/// Parses a file written by [`export_latents`].
pub fn read_latent_csv(path: &Path) -> Result<(Vec<usize>, Tensor<f64>)> {
    let text = fs::read_to_string(path)?;
    let bad = |m: String| Error::Invalid(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let frames = header.split(',').count().saturating_sub(1);
    let mut order = Vec::new();
    let mut data = Vec::new();
    for (n, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let basis = cells.next().unwrap_or_default();
        order.push(basis.parse().map_err(|_| bad(format!("row {n}: bad basis index `{basis}`")))?);
        let before = data.len();
        for c in cells {
            data.push(c.parse::<f64>().map_err(|_| bad(format!("row {n}: bad value `{c}`")))?);
        }
        if data.len() - before != frames {
            return Err(bad(format!("row {n} has {} values, header has {frames}", data.len() - before)));
        }
    }
    let rows = order.len();
    Ok((order, Tensor::new([rows, frames], data)?))
}
