use crate::error::{shape_err, Result};
use crate::graph::{Graph, Operation, Var};

struct LayerNorm {
    x: Var,
    gain: Var,
    shift: Var,
    width: usize,
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

impl Operation for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gain, self.shift]
    }

    fn backward(&self, graph: &Graph, _: Var, g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let c = self.width;
        let x = graph.data(self.x);
        let gain = graph.data(self.gain);
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dgain = vec![0.0f64; c];
        let mut dshift = vec![0.0f64; c];
        let mut xhat = vec![0.0f64; c];
        let mut dxhat = vec![0.0f64; c];
        for (r, (xr, gr)) in x.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
            let (mu, rstd) = (self.mean[r], self.rstd[r]);
            for i in 0..c {
                xhat[i] = (f64::from(xr[i]) - mu) * rstd;
                let gi = f64::from(gr[i]);
                dgain[i] += gi * xhat[i];
                dshift[i] += gi;
                dxhat[i] = gi * f64::from(gain[i]);
            }
            if let Some(dx) = dx.as_mut() {
                let m1 = dxhat.iter().sum::<f64>() / c as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for i in 0..c {
                    dx[r * c + i] = (rstd * (dxhat[i] - m1 - xhat[i] * m2)) as f32;
                }
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
        vec![dx, needs[1].then(|| cast(dgain)), needs[2].then(|| cast(dshift))]
    }
}

impl Graph {
    /// Normalizes every vector along the last axis to zero mean and unit
    /// variance (statistics in f64), then applies `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&width) = shape.last() else {
            return shape_err("layer_norm", "rank >= 1", shape);
        };
        if self.shape(gain) != [width] || self.shape(shift) != [width] {
            return shape_err("layer_norm", [width], (self.shape(gain), self.shape(shift)));
        }
        let xd = self.data(x);
        let gd = self.data(gain);
        let sd = self.data(shift);
        let rows = xd.len() / width;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for xr in xd.chunks_exact(width) {
            let mu = xr.iter().map(|&v| f64::from(v)).sum::<f64>() / width as f64;
            let var = xr.iter().map(|&v| (f64::from(v) - mu).powi(2)).sum::<f64>() / width as f64;
            let r = 1.0 / (var + eps).sqrt();
            out.extend(
                xr.iter()
                    .zip(gd.iter().zip(sd))
                    .map(|(&v, (&g, &s))| ((f64::from(v) - mu) * r * f64::from(g) + f64::from(s)) as f32),
            );
            mean.push(mu);
            rstd.push(r);
        }
        Ok(self.push_op(shape, out, Box::new(LayerNorm { x, gain, shift, width, mean, rstd })))
    }
}
