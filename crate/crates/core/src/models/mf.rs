//! Matrix factorization scored as `user · item + item_bias`.

use super::config::ModelConfig;
use super::init::Initializer;
use crate::corpus::ItemId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, ParamId, ParamStore, Tape, Tensor, Var};

/// User and item latent factors. Item rows are indexed by item id; row 0
/// (padding) exists only so ids index directly and is never scored.
#[derive(Debug, Clone)]
pub struct MfModel<T> {
    config: ModelConfig,
    num_users: usize,
    num_items: usize,
    params: ParamStore<T>,
    user_factors: ParamId,
    item_factors: ParamId,
    item_bias: ParamId,
}

impl<T: Scalar> MfModel<T> {
    pub(crate) fn new(
        config: ModelConfig,
        num_items: usize,
        num_users: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::Config(
                "vocabulary must contain at least one item".into(),
            ));
        }
        let d = config.latent_dim;
        let mut init = Initializer::new(seed);
        let mut params = ParamStore::new();
        let user_factors = params.add("user_factors", init.trunc_normal(&[num_users, d]));
        let item_factors = params.add("item_factors", init.trunc_normal(&[num_items + 1, d]));
        let item_bias = params.add("item_bias", Tensor::zeros(&[num_items + 1]));
        Ok(MfModel {
            config,
            num_users,
            num_items,
            params,
            user_factors,
            item_factors,
            item_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn check_item(&self, item: ItemId) -> Result<usize> {
        let i = item as usize;
        if i == 0 || i > self.num_items {
            return Err(Error::UnknownItem(item));
        }
        Ok(i)
    }

    /// Scores for `items`. Users outside the training set score with a zero
    /// vector, leaving only the item biases.
    pub fn mf_score(&self, user: Option<usize>, items: &[ItemId]) -> Result<Vec<T>> {
        let d = self.config.latent_dim;
        let factors = self.params.value(self.item_factors).data();
        let bias = self.params.value(self.item_bias).data();
        let u = self.user_vector(user);
        items
            .iter()
            .map(|&item| {
                let i = self.check_item(item)?;
                let dotp = match u {
                    Some(u) => dot(u, &factors[i * d..(i + 1) * d]),
                    None => T::zero(),
                };
                Ok(dotp + bias[i])
            })
            .collect()
    }

    fn user_vector(&self, user: Option<usize>) -> Option<&[T]> {
        let d = self.config.latent_dim;
        user.filter(|&u| u < self.num_users)
            .map(|u| &self.params.value(self.user_factors).data()[u * d..(u + 1) * d])
    }

    /// Score vector indexed by item id (length `V + 2`); padding and the
    /// unused mask slot are `-inf`.
    pub fn score_user(&self, user: Option<usize>) -> Vec<T> {
        let items: Vec<ItemId> = (1..=self.num_items as ItemId).collect();
        let mut out = Vec::with_capacity(self.num_items + 2);
        out.push(T::neg_infinity());
        out.extend(self.mf_score(user, &items).expect("ids are in range"));
        out.push(T::neg_infinity());
        out
    }

    /// Differentiable scores `[n]` for aligned `(user, item)` pairs.
    pub fn pair_scores<'t>(
        &self,
        tape: &'t Tape<T>,
        users: &[usize],
        items: &[ItemId],
    ) -> Result<Var<'t, T>> {
        if users.len() != items.len() {
            return Err(Error::Shape(format!(
                "{} users for {} items",
                users.len(),
                items.len()
            )));
        }
        if let Some(&u) = users.iter().find(|&&u| u >= self.num_users) {
            return Err(Error::Contract(format!(
                "user {u} unknown at training time"
            )));
        }
        let rows = items
            .iter()
            .map(|&i| self.check_item(i))
            .collect::<Result<Vec<_>>>()?;
        let uf = tape
            .param(&self.params, self.user_factors)
            .gather_rows(users)?;
        let vf = tape
            .param(&self.params, self.item_factors)
            .gather_rows(&rows)?;
        let bias = tape
            .param(&self.params, self.item_bias)
            .reshape(&[self.num_items + 1, 1])?
            .gather_rows(&rows)?;
        uf.row_dot(vf)?.add(bias.reshape(&[items.len()])?)
    }
}
