//! Layer-similarity (linear CKA) and per-patch cosine maps over encoder
//! features.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, PromptBank};
use crate::error::{Error, Result};
use crate::numerics::io::{load_tensors, save_tensors};
use crate::numerics::Tensor;
use crate::text::ClassEmbeddingTable;

fn centered(x: &Tensor) -> Result<Tensor> {
    let (n, p) = x.dims2()?;
    let mut means = vec![0.0; p];
    for r in 0..n {
        for (m, v) in means.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = x.data().to_vec();
    for r in 0..n {
        for c in 0..p {
            out[r * p + c] -= means[c];
        }
    }
    Tensor::matrix(n, p, out)
}

fn frobenius_sq(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// Linear CKA between `n×p` and `n×q` representations of the same rows.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, _) = x.dims2()?;
    let (m, _) = y.dims2()?;
    if n != m {
        return Err(Error::ShapeMismatch {
            op: "linear_cka",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if n < 2 {
        return Err(Error::invalid("linear CKA needs at least two rows"));
    }
    let xc = centered(x)?;
    let yc = centered(y)?;
    if frobenius_sq(&xc) == 0.0 || frobenius_sq(&yc) == 0.0 {
        return Err(Error::Undefined("linear CKA of a zero-variance input".into()));
    }
    let xt = xc.transpose()?;
    let yt = yc.transpose()?;
    let cross = frobenius_sq(&yt.matmul(&xc)?);
    let xx = frobenius_sq(&xt.matmul(&xc)?).sqrt();
    let yy = frobenius_sq(&yt.matmul(&yc)?).sqrt();
    Ok((cross / (xx * yy)).clamp(0.0, 1.0))
}

/// Per-layer token features for a batch of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDump {
    /// 1-based block indices.
    pub layers: Vec<usize>,
    pub image_ids: Vec<usize>,
    pub grid: usize,
    pub dim: usize,
    pub class_names: Vec<String>,
    /// `features[layer][image]`, each `N×d`.
    #[serde(skip)]
    pub features: Vec<Vec<Tensor>>,
    /// Class table used as cosine-map references, `C×d`.
    #[serde(skip)]
    pub class_table: Option<Tensor>,
}

impl FeatureDump {
    /// Encodes `images` and keeps every block.
    pub fn from_encoder(
        encoder: &Encoder,
        prompts: &PromptBank,
        images: &[(usize, &Tensor)],
        classes: Option<&ClassEmbeddingTable>,
    ) -> Result<Self> {
        let b = encoder.config.blocks;
        let mut features = vec![Vec::with_capacity(images.len()); b];
        for (_, img) in images {
            let f = encoder.encode(img, prompts)?;
            for (l, h) in f.per_block.into_iter().enumerate() {
                features[l].push(h);
            }
        }
        let dump = FeatureDump {
            layers: (1..=b).collect(),
            image_ids: images.iter().map(|(i, _)| *i).collect(),
            grid: encoder.config.grid(),
            dim: encoder.config.dim,
            class_names: classes.map(|c| c.names.clone()).unwrap_or_default(),
            features,
            class_table: classes.map(|c| c.table.clone()),
        };
        dump.validate()?;
        Ok(dump)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid * self.grid;
        if self.features.len() != self.layers.len() {
            return Err(Error::invalid("feature dump layer count mismatch"));
        }
        for layer in &self.features {
            if layer.len() != self.image_ids.len() {
                return Err(Error::invalid("feature dump image count mismatch"));
            }
            for h in layer {
                if h.shape() != [n, self.dim] {
                    return Err(Error::ShapeMismatch {
                        op: "feature_dump",
                        lhs: h.shape().to_vec(),
                        rhs: vec![n, self.dim],
                    });
                }
            }
        }
        if let Some(t) = &self.class_table {
            if t.shape() != [self.class_names.len(), self.dim] {
                return Err(Error::invalid("class table does not match class names"));
            }
        }
        Ok(())
    }

    /// Tokens of `layer` (position in `layers`) stacked over images.
    pub fn pooled(&self, layer: usize) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self.features[layer].iter().collect();
        Tensor::concat_rows(&parts)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        let flat: Vec<&Tensor> = self.features.iter().flatten().collect();
        save_tensors(dir.join("features.tensors"), flat.iter().copied())?;
        if let Some(t) = &self.class_table {
            save_tensors(dir.join("classes.tensors"), [t])?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut dump: FeatureDump =
            serde_json::from_str(&crate::error::read_text(dir.join("manifest.json"))?)?;
        let flat = load_tensors(dir.join("features.tensors"))?;
        let per = dump.image_ids.len();
        if flat.len() != per * dump.layers.len() {
            return Err(Error::format(dir.join("features.tensors"), "tensor count does not match manifest"));
        }
        dump.features = flat.chunks(per.max(1)).map(|c| c.to_vec()).collect();
        if dump.features.len() < dump.layers.len() {
            dump.features.resize(dump.layers.len(), Vec::new());
        }
        let classes = dir.join("classes.tensors");
        if classes.exists() {
            dump.class_table = load_tensors(classes)?.into_iter().next();
        }
        dump.validate()?;
        Ok(dump)
    }
}

/// Symmetric `L×L` CKA matrix over tokens pooled across the dump's images.
pub fn cka_matrix(dump: &FeatureDump) -> Result<Tensor> {
    let l = dump.layers.len();
    if l < 2 {
        return Err(Error::invalid("CKA matrix needs at least two layers"));
    }
    let pooled: Vec<Tensor> = (0..l).map(|i| dump.pooled(i)).collect::<Result<_>>()?;
    let mut m = Tensor::eye(l);
    for i in 0..l {
        for j in i + 1..l {
            let v = linear_cka(&pooled[i], &pooled[j])?;
            m.data_mut()[i * l + j] = v;
            m.data_mut()[j * l + i] = v;
        }
    }
    Ok(m)
}

/// Mean off-diagonal entry among the listed layers (1-based block indices).
pub fn mean_offdiag(matrix: &Tensor, layers: &[usize], among: &[usize]) -> Result<f64> {
    let idx: Vec<usize> = among
        .iter()
        .map(|b| {
            layers
                .iter()
                .position(|l| l == b)
                .ok_or_else(|| Error::invalid(format!("block {b} not in dump")))
        })
        .collect::<Result<_>>()?;
    let (mut sum, mut count) = (0.0, 0usize);
    for &i in &idx {
        for &j in &idx {
            if i != j {
                sum += matrix.at(i, j);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("need at least two layers"));
    }
    Ok(sum / count as f64)
}

/// Per-patch cosine similarities; `zero_rows` lists patches with a zero
/// feature vector, which are given value 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CosineMap {
    pub values: Vec<f64>,
    pub zero_rows: Vec<usize>,
}

pub fn cosine_map(h: &Tensor, reference: &[f64]) -> Result<CosineMap> {
    let (n, d) = h.dims2()?;
    if reference.len() != d {
        return Err(Error::ShapeMismatch {
            op: "cosine_map",
            lhs: h.shape().to_vec(),
            rhs: vec![1, reference.len()],
        });
    }
    let rn = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rn == 0.0 {
        return Err(Error::invalid("cosine map reference has zero norm"));
    }
    let mut values = Vec::with_capacity(n);
    let mut zero_rows = Vec::new();
    for r in 0..n {
        let row = h.row(r);
        let hn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if hn == 0.0 {
            values.push(0.0);
            zero_rows.push(r);
            continue;
        }
        let dot: f64 = row.iter().zip(reference).map(|(a, b)| a * b).sum();
        values.push((dot / (hn * rn)).clamp(-1.0, 1.0));
    }
    Ok(CosineMap { values, zero_rows })
}

/// Writes a binary PGM, mapping `[lo, hi]` to `0..=255` and repeating each
/// cell `scale` times along both axes.
pub fn write_pgm(
    path: impl AsRef<Path>,
    values: &[f64],
    width: usize,
    lo: f64,
    hi: f64,
    scale: usize,
) -> Result<()> {
    if width == 0 || !values.len().is_multiple_of(width) || scale == 0 || !(hi > lo) {
        return Err(Error::invalid("bad heatmap geometry or range"));
    }
    let height = values.len() / width;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", width * scale, height * scale)?;
    for y in 0..height {
        let row: Vec<u8> = (0..width)
            .flat_map(|x| {
                let v = ((values[y * width + x] - lo) / (hi - lo)).clamp(0.0, 1.0);
                std::iter::repeat_n((v * 255.0).round() as u8, scale)
            })
            .collect();
        for _ in 0..scale {
            out.write_all(&row)?;
        }
    }
    Ok(())
}

pub fn matrix_csv(m: &Tensor, labels: &[usize]) -> Result<String> {
    let (r, c) = m.dims2()?;
    if labels.len() != r || r != c {
        return Err(Error::invalid("matrix labels do not match a square matrix"));
    }
    let mut s = String::from("block");
    for l in labels {
        s.push_str(&format!(",{l}"));
    }
    s.push('\n');
    for i in 0..r {
        s.push_str(&labels[i].to_string());
        for j in 0..c {
            s.push_str(&format!(",{:.9}", m.at(i, j)));
        }
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(seed: u64, n: usize, p: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn([n, p], 1.0, &mut rng)
    }

    /// Orthogonal matrix from Gram-Schmidt on a random square matrix.
    fn orthogonal(seed: u64, p: usize) -> Tensor {
        let a = rand(seed, p, p);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for r in 0..p {
            let mut v = a.row(r).to_vec();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.push(v.into_iter().map(|x| x / n).collect());
        }
        Tensor::matrix(p, p, q.concat()).unwrap()
    }

    #[test]
    fn invariances() {
        let x = rand(1, 40, 6);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let xq = x.matmul(&orthogonal(2, 6)).unwrap();
        assert!((linear_cka(&x, &xq).unwrap() - 1.0).abs() < 1e-9);
        assert!((linear_cka(&x, &x.map(|v| -3.5 * v)).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_variance_is_undefined() {
        let x = Tensor::full([5, 3], 2.0);
        assert!(matches!(linear_cka(&x, &rand(1, 5, 3)), Err(Error::Undefined(_))));
    }

    #[test]
    fn independent_layers_have_low_similarity() {
        for seed in 0..20 {
            let v = linear_cka(&rand(2 * seed, 512, 16), &rand(2 * seed + 1, 512, 16)).unwrap();
            assert!(v < 0.2, "seed {seed}: {v}");
        }
    }

    fn dump(layers: Vec<Tensor>) -> FeatureDump {
        let n = layers[0].rows();
        let grid = (n as f64).sqrt() as usize;
        FeatureDump {
            layers: (1..=layers.len()).collect(),
            image_ids: vec![0],
            grid,
            dim: layers[0].cols(),
            class_names: vec![],
            features: layers.into_iter().map(|t| vec![t]).collect(),
            class_table: None,
        }
    }

    #[test]
    fn matrix_properties() {
        let x = rand(3, 16, 4);
        let m = cka_matrix(&dump(vec![x.clone(), x])).unwrap();
        assert!(m.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let m = cka_matrix(&dump(vec![rand(4, 16, 4), rand(5, 16, 4), rand(6, 16, 4)])).unwrap();
        assert_eq!(m, m.transpose().unwrap());
        assert!(m.data().iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v)));
        assert!(cka_matrix(&dump(vec![rand(4, 16, 4)])).is_err());
    }

    #[test]
    fn cosine_conventions() {
        let h = Tensor::matrix(3, 2, vec![1.0, 2.0, 0.0, 0.0, -2.0, 1.0]).unwrap();
        let m = cosine_map(&h, &[1.0, 2.0]).unwrap();
        assert!((m.values[0] - 1.0).abs() < 1e-15);
        assert_eq!(m.zero_rows, vec![1]);
        assert_eq!(m.values[2], 0.0);
        let scaled = cosine_map(&h, &[5.0, 10.0]).unwrap();
        assert_eq!(m.zero_rows, scaled.zero_rows);
        for (a, b) in m.values.iter().zip(&scaled.values) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(cosine_map(&h, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn dump_round_trip_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = dump(vec![rand(1, 4, 3), rand(2, 4, 3)]);
        d.class_names = vec!["x".into()];
        d.class_table = Some(rand(3, 1, 3));
        d.save(dir.path()).unwrap();
        assert_eq!(FeatureDump::load(dir.path()).unwrap(), d);
        let pgm = dir.path().join("m.pgm");
        write_pgm(&pgm, &[-1.0, 0.0, 0.5, 1.0], 2, -1.0, 1.0, 3).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n6 6\n255\n"));
        assert_eq!(bytes.len(), 11 + 36);
        assert_eq!(bytes[11], 0);
        assert_eq!(*bytes.last().unwrap(), 255);
    }
}
