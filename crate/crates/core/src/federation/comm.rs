use serde::{Deserialize, Serialize};

/// Running count of scalars exchanged between server and clients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub uplink_scalars: u64,
    pub downlink_scalars: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommEvent {
    /// `clients` uploads of a full `pool_size × classes` logit matrix.
    LogitUplink {
        clients: usize,
        pool_size: usize,
        classes: usize,
    },
    /// All `clusters` centroids sent to each of `clients`.
    CentroidDownlink {
        clients: usize,
        clusters: usize,
        pool_size: usize,
        classes: usize,
    },
    ParamUplink {
        params: usize,
    },
    ParamDownlink {
        params: usize,
    },
}

impl CommLedger {
    pub fn total(&self) -> u64 {
        self.uplink_scalars + self.downlink_scalars
    }

    pub fn record(&mut self, event: CommEvent) {
        *self = account_comm(*self, event);
    }
}

pub fn account_comm(mut ledger: CommLedger, event: CommEvent) -> CommLedger {
    match event {
        CommEvent::LogitUplink {
            clients,
            pool_size,
            classes,
        } => ledger.uplink_scalars += (clients * pool_size * classes) as u64,
        CommEvent::CentroidDownlink {
            clients,
            clusters,
            pool_size,
            classes,
        } => ledger.downlink_scalars += (clients * clusters * pool_size * classes) as u64,
        CommEvent::ParamUplink { params } => ledger.uplink_scalars += params as u64,
        CommEvent::ParamDownlink { params } => ledger.downlink_scalars += params as u64,
    }
    ledger
}

/// `T·m·|P|·N·(1 + c)`.
pub fn perfed_closed_form(
    rounds: usize,
    m: usize,
    pool_size: usize,
    classes: usize,
    clusters: usize,
) -> u64 {
    (rounds * m * pool_size * classes * (1 + clusters)) as u64
}

/// `T·2·m·n_params`.
pub fn fedavg_closed_form(rounds: usize, m: usize, params: usize) -> u64 {
    (rounds * 2 * m * params) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accounting_examples() {
        let l = account_comm(
            CommLedger::default(),
            CommEvent::LogitUplink {
                clients: 10,
                pool_size: 2000,
                classes: 10,
            },
        );
        assert_eq!(l.uplink_scalars, 200_000);
        let l = account_comm(
            l,
            CommEvent::CentroidDownlink {
                clients: 10,
                clusters: 3,
                pool_size: 2000,
                classes: 10,
            },
        );
        assert_eq!(l.total(), 800_000);
        assert_eq!(perfed_closed_form(1, 10, 2000, 10, 3), 800_000);

        let mut f = CommLedger::default();
        for _ in 0..3 {
            f.record(CommEvent::ParamDownlink { params: 67 });
            f.record(CommEvent::ParamUplink { params: 67 });
        }
        assert_eq!(f.total(), fedavg_closed_form(1, 3, 67));
    }
}
