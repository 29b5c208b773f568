use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    BatchNorm,
    Linear,
}

/// Spatial extent a layer's multiply-accumulates run over.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extent {
    /// Feature map at this output stride of the network input.
    Stride(usize),
    /// A single pixel (pooled features, fully connected layers).
    Global,
}

/// One parameterized layer, with everything the cost model needs.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub output_padding: usize,
    pub bias: bool,
    /// Layers with the same group share one weight tensor.
    pub sharing_group: Option<String>,
    /// How many times the layer is applied per forward pass.
    pub uses: u32,
    pub extent: Extent,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize, extent: Extent) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            c_in,
            c_out,
            kernel,
            stride,
            padding: kernel / 2,
            dilation: 1,
            output_padding: 0,
            bias: false,
            sharing_group: None,
            uses: 1,
            extent,
        }
    }

    /// Transposed convolution; `extent` is the extent of its input, where
    /// each input pixel scatters one kernel.
    pub fn conv_transpose(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize, extent: Extent) -> Self {
        Self {
            kind: LayerKind::ConvTranspose,
            output_padding: stride - 1,
            ..Self::conv(name, c_in, c_out, kernel, stride, extent)
        }
    }

    pub fn batch_norm(name: impl Into<String>, channels: usize, extent: Extent) -> Self {
        Self {
            kind: LayerKind::BatchNorm,
            kernel: 1,
            padding: 0,
            ..Self::conv(name, channels, channels, 1, 1, extent)
        }
    }

    pub fn linear(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            bias: true,
            padding: 0,
            ..Self::conv(name, c_in, c_out, 1, 1, Extent::Global)
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = dilation * (self.kernel / 2);
        self
    }

    pub fn shared(mut self, group: impl Into<String>, uses: u32) -> Self {
        self.sharing_group = Some(group.into());
        self.uses = uses;
        self
    }

    /// Trainable scalars held by this layer.
    pub fn params(&self) -> u64 {
        let (ci, co, k) = (self.c_in as u64, self.c_out as u64, self.kernel as u64);
        let bias = if self.bias { co } else { 0 };
        match self.kind {
            LayerKind::Conv | LayerKind::ConvTranspose => ci * co * k * k + bias,
            LayerKind::Linear => ci * co + bias,
            LayerKind::BatchNorm => 2 * co,
        }
    }

    /// Multiply-accumulates `C1 * C2 * K1 * K2 * H * W` for an input of
    /// `h x w`, summed over every use. Normalization costs nothing.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (fh, fw) = match self.extent {
            Extent::Stride(s) => ((h / s) as u64, (w / s) as u64),
            Extent::Global => (1, 1),
        };
        let (ci, co, k) = (self.c_in as u64, self.c_out as u64, self.kernel as u64);
        let per_use = match self.kind {
            LayerKind::Conv | LayerKind::ConvTranspose => ci * co * k * k * fh * fw,
            LayerKind::Linear => ci * co,
            LayerKind::BatchNorm => 0,
        };
        per_use * self.uses as u64
    }

    /// Parameter tensor shapes as `(suffix, dims)`; the kernel suffix is empty.
    pub fn tensor_shapes(&self) -> Vec<(&'static str, [usize; 4])> {
        let k = self.kernel;
        match self.kind {
            LayerKind::Conv => vec![("", [self.c_out, self.c_in, k, k])],
            LayerKind::ConvTranspose => vec![("", [self.c_in, self.c_out, k, k])],
            LayerKind::Linear => vec![("", [self.c_out, self.c_in, 1, 1]), (".bias", [1, self.c_out, 1, 1])],
            LayerKind::BatchNorm => vec![(".gamma", [1, self.c_out, 1, 1]), (".beta", [1, self.c_out, 1, 1])],
        }
    }
}
