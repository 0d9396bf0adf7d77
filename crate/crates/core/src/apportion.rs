//! Largest-remainder apportionment of an integer total over real quotas.

/// Floors every quota and hands the leftover seats to the largest fractional
/// remainders. Ties go to the lower index. The result sums to `total` as long
/// as the quotas sum to `total` (up to floating error).
pub fn largest_remainder(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut seats: Vec<usize> = quotas.iter().map(|q| q.max(0.0).floor() as usize).collect();
    let assigned: usize = seats.iter().sum();
    if assigned >= total {
        return seats;
    }
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    let rem = |i: usize| quotas[i].max(0.0) - quotas[i].max(0.0).floor();
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(total - assigned) {
        seats[i] += 1;
    }
    seats
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hands_out_leftover_seats_by_remainder() {
        assert_eq!(largest_remainder(&[1.9355, 3.2258, 4.8387], 10), vec![2, 3, 5]);
        assert_eq!(largest_remainder(&[2.5, 2.5], 5), vec![3, 2]);
        assert_eq!(largest_remainder(&[], 0), Vec::<usize>::new());
    }
}
