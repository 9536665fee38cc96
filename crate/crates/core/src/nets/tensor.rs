use crate::real::Real;

/// Single-sample activation map in channel-major (`C x H x W`) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(self.channels + other.channels, self.height, self.width, data)
    }

    /// Inverse of [`Tensor::concat`]: the first `channels` channels and the rest.
    pub fn split(self, channels: usize) -> (Tensor<T>, Tensor<T>) {
        let (h, w) = (self.height, self.width);
        let rest = self.channels - channels;
        let mut head = self.data;
        let tail = head.split_off(channels * h * w);
        (
            Tensor::from_vec(channels, h, w, head),
            Tensor::from_vec(rest, h, w, tail),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
