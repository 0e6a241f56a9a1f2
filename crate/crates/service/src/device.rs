//! Participant display screening.

use serde::{Deserialize, Serialize};

pub const MIN_VIRTUAL: (u32, u32) = (1920, 1080);
pub const MIN_DIAGONAL_INCHES: f64 = 14.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedDevice {
    pub diagonal_inches: f64,
    pub physical_width: u32,
    pub physical_height: u32,
    pub virtual_width: u32,
    pub virtual_height: u32,
}

/// What the browser measured itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredDevice {
    pub virtual_width: u32,
    pub virtual_height: u32,
    pub pixel_ratio: f64,
    pub window_maximized: bool,
}

/// Both the reported and the measured characteristics are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub reported: ReportedDevice,
    pub measured: MeasuredDevice,
}

impl DeviceProfile {
    /// `Err(reason)` unless the measured virtual resolution is at least
    /// 1920x1080 and the reported diagonal exceeds 14 inches.
    pub fn screen(&self) -> Result<(), String> {
        let m = &self.measured;
        if m.virtual_width < MIN_VIRTUAL.0 || m.virtual_height < MIN_VIRTUAL.1 {
            return Err(format!(
                "measured virtual resolution {}x{} is below {}x{}",
                m.virtual_width, m.virtual_height, MIN_VIRTUAL.0, MIN_VIRTUAL.1
            ));
        }
        if !(self.reported.diagonal_inches > MIN_DIAGONAL_INCHES) {
            return Err(format!(
                "screen diagonal {} in is not above {MIN_DIAGONAL_INCHES} in",
                self.reported.diagonal_inches
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn profile(reported: (u32, u32), measured: (u32, u32), ratio: f64, diag: f64) -> DeviceProfile {
        DeviceProfile {
            reported: ReportedDevice {
                diagonal_inches: diag,
                physical_width: reported.0,
                physical_height: reported.1,
                virtual_width: reported.0,
                virtual_height: reported.1,
            },
            measured: MeasuredDevice {
                virtual_width: measured.0,
                virtual_height: measured.1,
                pixel_ratio: ratio,
                window_maximized: true,
            },
        }
    }

    #[test]
    fn thresholds() {
        assert!(profile((1920, 1080), (1920, 1080), 1.0, 15.0).screen().is_ok());
        assert!(profile((1366, 768), (1366, 768), 1.0, 15.6).screen().is_err());
        assert!(profile((3840, 2160), (1280, 720), 3.0, 15.6).screen().is_err());
        assert!(profile((1920, 1080), (1920, 1080), 1.0, 14.0).screen().is_err());
        assert!(profile((2560, 1440), (2560, 1440), 1.0, 27.0).screen().is_ok());
    }
}
